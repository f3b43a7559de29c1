//! Synthetic identity prototypes and a linearly shifted, noisy target domain.
//!
//! Sample `i` of the target domain belongs to identity `i % c_true`, so
//! identities are interleaved rather than grouped. Every draw goes through a
//! [`ChaCha8Rng`] seeded from the caller's seed, which keeps the output
//! bit-identical across platforms.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};

/// Total draws allowed when rejection-sampling prototypes.
pub const MAX_PROTOTYPE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityPrototypes {
    /// `c_true × d`, every row unit-norm.
    pub prototypes: Matrix,
}

impl IdentityPrototypes {
    pub fn c_true(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDomain {
    pub raw_features: Matrix,
    /// Ground-truth identities. Only evaluation code should read these.
    pub hidden_labels: Vec<usize>,
    /// The `d × d` map `A = I + shift_scale · R`.
    pub shift: Matrix,
    pub noise_sigma: f64,
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_gaussian_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws `c_true` unit vectors uniformly on the sphere, rejecting candidates
/// closer than `min_separation` to an accepted one.
pub fn generate_prototypes(
    c_true: usize,
    d: usize,
    min_separation: f64,
    seed: u64,
) -> Result<IdentityPrototypes> {
    if c_true < 2 {
        return Err(Error::config("c_true", "need at least 2 identities"));
    }
    if d < 2 {
        return Err(Error::config("d", "dimension must be at least 2"));
    }
    if !(0.0..2.0).contains(&min_separation) {
        return Err(Error::config("min_separation", "must lie in [0, 2)"));
    }

    let mut rng = rng_for(seed);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(c_true);
    let mut attempts = 0;
    while accepted.len() < c_true {
        if attempts == MAX_PROTOTYPE_ATTEMPTS {
            return Err(Error::config(
                "min_separation",
                format!(
                    "could not place {c_true} prototypes in d={d} at separation {min_separation} \
                     within {MAX_PROTOTYPE_ATTEMPTS} attempts"
                ),
            ));
        }
        attempts += 1;
        let cand = unit_gaussian_vector(&mut rng, d);
        let min_sq = min_separation * min_separation;
        if accepted
            .iter()
            .all(|p| crate::matrix::squared_distance(p, &cand) >= min_sq)
        {
            accepted.push(cand);
        }
    }
    Ok(IdentityPrototypes {
        prototypes: Matrix::from_rows(&accepted)?,
    })
}

/// Samples `n_per_id` points per identity as `A · prototype + noise`.
pub fn sample_target(
    prototypes: &IdentityPrototypes,
    n_per_id: usize,
    noise_sigma: f64,
    shift_scale: f64,
    seed: u64,
) -> Result<TargetDomain> {
    if n_per_id == 0 {
        return Err(Error::config("n_per_id", "must be at least 1"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config("noise_sigma", "must be finite and >= 0"));
    }
    if !(shift_scale >= 0.0 && shift_scale.is_finite()) {
        return Err(Error::config("shift_scale", "must be finite and >= 0"));
    }

    let d = prototypes.dim();
    let c_true = prototypes.c_true();
    let mut rng = rng_for(seed);

    // R has N(0, 1/d) entries so that ‖R p‖ ≈ 1 for a unit vector p.
    let r_scale = 1.0 / (d as f64).sqrt();
    let mut shift = Matrix::identity(d);
    for v in shift.as_mut_slice() {
        let r: f64 = rng.sample(StandardNormal);
        *v += shift_scale * r_scale * r;
    }

    let centers: Vec<Vec<f64>> = prototypes
        .prototypes
        .iter_rows()
        .map(|p| shift.mul_vec(p))
        .collect();

    let n = c_true * n_per_id;
    let mut raw = Matrix::zeros(n, d);
    let mut hidden_labels = Vec::with_capacity(n);
    for i in 0..n {
        let id = i % c_true;
        hidden_labels.push(id);
        let row = raw.row_mut(i);
        for (x, c) in row.iter_mut().zip(&centers[id]) {
            let e: f64 = rng.sample(StandardNormal);
            *x = c + noise_sigma * e;
        }
    }

    Ok(TargetDomain {
        raw_features: raw,
        hidden_labels,
        shift,
        noise_sigma,
    })
}

/// Replaces exactly `round(fraction · N)` labels with a uniformly random
/// different identity. Returns the corrupted labels and the replacement mask.
pub fn corrupt_labels(
    labels: &[usize],
    fraction: f64,
    c_true: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("corrupt_fraction", "must lie in [0, 1]"));
    }
    let n = labels.len();
    let m = (fraction * n as f64).round() as usize;
    let mut out = labels.to_vec();
    let mut mask = vec![false; n];
    if m == 0 {
        return Ok((out, mask));
    }
    if c_true < 2 {
        return Err(Error::config(
            "c_true",
            "corruption needs at least 2 identities",
        ));
    }
    if let Some(i) = labels.iter().position(|&l| l >= c_true) {
        return Err(Error::Input(format!(
            "label {} at position {i} is outside [0, {c_true})",
            labels[i]
        )));
    }

    let mut rng = rng_for(seed);
    let mut picked = index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    for i in picked {
        let offset = 1 + rng.gen_range(0..c_true - 1);
        out[i] = (labels[i] + offset) % c_true;
        mask[i] = true;
    }
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::squared_distance;

    fn all_pairs_min_distance(m: &Matrix) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..m.rows() {
            for j in (i + 1)..m.rows() {
                best = best.min(squared_distance(m.row(i), m.row(j)).sqrt());
            }
        }
        best
    }

    #[test]
    fn antipodal_pair() {
        let p = generate_prototypes(2, 2, 1.9, 7).unwrap();
        assert_eq!(p.c_true(), 2);
        assert!(all_pairs_min_distance(&p.prototypes) >= 1.9);
    }

    #[test]
    fn five_prototypes_separated_and_unit() {
        let p = generate_prototypes(5, 8, 0.5, 1).unwrap();
        let mut pairs = 0;
        for i in 0..5 {
            assert!((norm(p.prototypes.row(i)) - 1.0).abs() <= 1e-9);
            for j in (i + 1)..5 {
                pairs += 1;
                let dist = squared_distance(p.prototypes.row(i), p.prototypes.row(j)).sqrt();
                assert!(dist >= 0.5, "pair ({i},{j}) at {dist}");
            }
        }
        assert_eq!(pairs, 10);
    }

    #[test]
    fn infeasible_packing_is_config_error() {
        let err = generate_prototypes(100, 2, 1.99, 3).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "min_separation"));
    }

    #[test]
    fn bad_shape_rejected() {
        assert!(matches!(
            generate_prototypes(1, 4, 0.1, 0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            generate_prototypes(3, 1, 0.1, 0),
            Err(Error::Config { .. })
        ));
        assert!(generate_prototypes(3, 4, 2.0, 0).is_err());
    }

    #[test]
    fn zero_noise_zero_shift_reproduces_prototypes() {
        let p = generate_prototypes(4, 6, 0.3, 11).unwrap();
        let t = sample_target(&p, 10, 0.0, 0.0, 0).unwrap();
        assert_eq!(t.raw_features.rows(), 40);
        for i in 0..40 {
            assert_eq!(t.raw_features.row(i), p.prototypes.row(t.hidden_labels[i]));
        }
    }

    #[test]
    fn per_identity_means_near_shifted_prototype() {
        let p = generate_prototypes(5, 8, 0.3, 9).unwrap();
        let sigma = 0.05;
        let t = sample_target(&p, 20, sigma, 0.1, 2).unwrap();
        assert_eq!(t.raw_features.rows(), 100);
        let se = sigma / (20f64).sqrt();
        let mut within_3se = 0;
        let mut residual_sq = 0.0;
        for id in 0..5 {
            // recompute A·p by hand
            let proto = p.prototypes.row(id);
            let mut expected = vec![0.0; 8];
            for (r, e) in expected.iter_mut().enumerate() {
                for c in 0..8 {
                    *e += t.shift[(r, c)] * proto[c];
                }
            }
            let members: Vec<usize> = (0..100).filter(|&i| t.hidden_labels[i] == id).collect();
            assert_eq!(members.len(), 20);
            for c in 0..8 {
                for &i in &members {
                    residual_sq += (t.raw_features[(i, c)] - expected[c]).powi(2);
                }
                let mean =
                    members.iter().map(|&i| t.raw_features[(i, c)]).sum::<f64>() / 20.0;
                let z = (mean - expected[c]).abs() / se;
                assert!(z <= 4.0, "identity {id} coord {c}: z = {z}");
                within_3se += usize::from(z <= 3.0);
            }
        }
        // 40 coordinates at a 3-sigma bound: one excursion is expected ~10% of the time
        assert!(within_3se >= 39, "{within_3se}/40 coordinates within 3 standard errors");
        let var = residual_sq / 800.0 / (sigma * sigma);
        assert!((var - 1.0).abs() < 0.15, "noise variance ratio {var}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = generate_prototypes(5, 8, 0.3, 9).unwrap();
        let a = sample_target(&p, 20, 0.05, 0.1, 2).unwrap();
        let b = sample_target(&p, 20, 0.05, 0.1, 2).unwrap();
        assert_eq!(a, b);
        let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.raw_features), bits(&b.raw_features));
    }

    #[test]
    fn corruption_counts() {
        let labels: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let (same, mask) = corrupt_labels(&labels, 0.0, 5, 4).unwrap();
        assert_eq!(same, labels);
        assert!(mask.iter().all(|&m| !m));

        let (bad, mask) = corrupt_labels(&labels, 0.3, 5, 4).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 30);
        for i in 0..100 {
            assert_eq!(mask[i], bad[i] != labels[i]);
            assert!(bad[i] < 5);
        }

        let (all, mask) = corrupt_labels(&labels, 1.0, 5, 4).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert!(all.iter().zip(&labels).all(|(a, b)| a != b));
    }

    #[test]
    fn corruption_needs_two_identities() {
        let labels = vec![0; 10];
        assert!(matches!(
            corrupt_labels(&labels, 0.5, 1, 0),
            Err(Error::Config { .. })
        ));
    }
}
