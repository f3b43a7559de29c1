//! Self-paced sample selection.
//!
//! With the model fixed, minimizing `Σ v_i u_i − β Σ v_i` over binary `v`
//! keeps exactly the samples with `u_i ≤ β`. The threshold `β` is set to the
//! `count`-th smallest uncertainty so that a scheduled fraction `p_t` of the
//! data is selected, and `p_t` grows from `p0` to 1 along a rescaled
//! log-exp curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest N the exhaustive oracle accepts.
pub const BRUTE_FORCE_MAX_N: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    pub uncertainties: Vec<f64>,
    pub indicators: Vec<bool>,
    pub beta: f64,
    pub p_t: f64,
    pub step: usize,
    pub horizon: usize,
}

impl SelectionState {
    pub fn selected_count(&self) -> usize {
        self.indicators.iter().filter(|&&v| v).count()
    }
}

/// `p(t) = p0 + ln(1 + (e^{h(1−p0)} − 1)·t/T) / h`.
pub fn schedule_p(t: usize, horizon: usize, p0: f64, h: f64) -> Result<f64> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::config("p0", "must lie in (0, 1)"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config("h", "must be finite and > 0"));
    }
    if t > horizon {
        return Err(Error::config("T", format!("step {t} beyond horizon {horizon}")));
    }
    if horizon == 0 {
        // a single step already covers the whole schedule
        return Ok(1.0);
    }
    let frac = t as f64 / horizon as f64;
    Ok(p0 + ((h * (1.0 - p0)).exp_m1() * frac).ln_1p() / h)
}

pub fn selection_count(n: usize, p_t: f64) -> usize {
    ((n as f64 * p_t).round() as usize).clamp(1, n)
}

/// Sample indices sorted by `(u_i, i)`.
fn ranked(uncertainties: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..uncertainties.len()).collect();
    order.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]).then(a.cmp(&b)));
    order
}

fn check_finite(uncertainties: &[f64]) -> Result<()> {
    let bad: Vec<usize> = uncertainties
        .iter()
        .enumerate()
        .filter(|(_, u)| !u.is_finite())
        .map(|(i, _)| i)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Input(format!("non-finite uncertainties at indices {bad:?}")))
    }
}

/// Threshold `β` as the `count`-th smallest uncertainty, with
/// `count = clamp(round(N · p_t), 1, N)`.
pub fn compute_beta(uncertainties: &[f64], p_t: f64) -> Result<(f64, usize)> {
    if uncertainties.is_empty() {
        return Err(Error::Input("no uncertainties".into()));
    }
    if !(p_t > 0.0 && p_t <= 1.0) {
        return Err(Error::config("p_t", "must lie in (0, 1]"));
    }
    check_finite(uncertainties)?;
    let count = selection_count(uncertainties.len(), p_t);
    let order = ranked(uncertainties);
    Ok((uncertainties[order[count - 1]], count))
}

/// Selects the `count` lowest-ranked samples (ties by index).
pub fn vstep(uncertainties: &[f64], beta: f64, count: usize) -> Result<Vec<bool>> {
    let n = uncertainties.len();
    if count == 0 || count > n {
        return Err(Error::Contract(format!("count {count} outside [1, {n}]")));
    }
    check_finite(uncertainties)?;
    let order = ranked(uncertainties);
    if uncertainties[order[count - 1]] != beta {
        return Err(Error::Contract(format!(
            "beta {beta} is not the {count}-th smallest uncertainty ({})",
            uncertainties[order[count - 1]]
        )));
    }
    let mut v = vec![false; n];
    for &i in &order[..count] {
        v[i] = true;
    }
    Ok(v)
}

/// `Σ v_i u_i − β Σ v_i`.
pub fn objective_value(uncertainties: &[f64], indicators: &[bool], beta: f64) -> f64 {
    uncertainties
        .iter()
        .zip(indicators)
        .filter(|(_, &v)| v)
        .map(|(&u, _)| u - beta)
        .sum()
}

/// Exhaustive minimizer of the selection objective over all `2^N` vectors.
/// Ties prefer more selected samples, then the lexicographically smallest
/// vector (with `false < true`).
pub fn brute_force_vstep(uncertainties: &[f64], beta: f64) -> Result<Vec<bool>> {
    let n = uncertainties.len();
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::OracleSize {
            n,
            max: BRUTE_FORCE_MAX_N,
        });
    }
    let decode = |mask: u32| -> Vec<bool> { (0..n).map(|i| mask >> (n - 1 - i) & 1 == 1).collect() };
    let mut best_mask = 0u32;
    let mut best_obj = 0.0;
    let mut best_count = 0u32;
    // ascending masks visit vectors in lexicographic order, so only strict
    // improvements replace the incumbent
    for mask in 1u32..(1u32 << n) {
        let v = decode(mask);
        let obj = objective_value(uncertainties, &v, beta);
        let count = mask.count_ones();
        if obj < best_obj || (obj == best_obj && count > best_count) {
            best_mask = mask;
            best_obj = obj;
            best_count = count;
        }
    }
    Ok(decode(best_mask))
}

/// Soft weights `exp(−u_i / temperature)` used instead of binary indicators.
pub fn reweight_indicators(uncertainties: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config("temperature", "must be finite and > 0"));
    }
    check_finite(uncertainties)?;
    Ok(uncertainties.iter().map(|u| (-u / temperature).exp()).collect())
}

/// Full v-step for one refinery step.
pub fn select(uncertainties: &[f64], step: usize, horizon: usize, p0: f64, h: f64) -> Result<SelectionState> {
    let p_t = schedule_p(step, horizon, p0, h)?;
    let (beta, count) = compute_beta(uncertainties, p_t)?;
    let indicators = vstep(uncertainties, beta, count)?;
    Ok(SelectionState {
        uncertainties: uncertainties.to_vec(),
        indicators,
        beta,
        p_t,
        step,
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(schedule_p(0, 100, 0.3, 1.5).unwrap(), 0.3);
        assert!((schedule_p(100, 100, 0.3, 1.5).unwrap() - 1.0).abs() <= 1e-12);
        // 50-digit evaluation: 0.73794086603846526...
        let mid = schedule_p(50, 100, 0.3, 1.5).unwrap();
        assert!((mid - 0.737_940_866_038_465_3).abs() <= 1e-12);
        assert!(schedule_p(101, 100, 0.3, 1.5).is_err());
        assert!(schedule_p(1, 10, 1.0, 1.5).is_err());
        assert!(schedule_p(1, 10, 0.3, 0.0).is_err());
    }

    #[test]
    fn beta_examples() {
        let u = [0.5, 0.1, 0.9, 0.3];
        assert_eq!(compute_beta(&u, 0.5).unwrap(), (0.3, 2));
        assert_eq!(compute_beta(&u, 1.0).unwrap(), (0.9, 4));
        assert_eq!(vstep(&u, 0.3, 2).unwrap(), vec![false, true, false, true]);
        assert!(compute_beta(&[0.1, f64::NAN], 0.5).is_err());
    }

    #[test]
    fn ties_select_lowest_indices() {
        let u = [0.7; 10];
        let (beta, count) = compute_beta(&u, 0.5).unwrap();
        assert_eq!(count, 5);
        let v = vstep(&u, beta, count).unwrap();
        assert_eq!(v, (0..10).map(|i| i < 5).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_fraction_still_selects_one() {
        let (beta, count) = compute_beta(&[0.4, 0.2, 0.3], 0.01).unwrap();
        assert_eq!((beta, count), (0.2, 1));
    }

    #[test]
    fn inconsistent_pair_is_contract_error() {
        assert!(matches!(vstep(&[0.1, 0.2], 0.15, 1), Err(Error::Contract(_))));
        assert!(matches!(vstep(&[0.1, 0.2], 0.1, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn objective_examples() {
        assert_eq!(objective_value(&[0.2, 0.8], &[false, false], 0.5), 0.0);
        assert!((objective_value(&[0.2, 0.8], &[true, false], 0.5) + 0.3).abs() < 1e-15);
    }

    #[test]
    fn brute_force_small_cases() {
        assert_eq!(brute_force_vstep(&[0.3], 0.5).unwrap(), vec![true]);
        assert_eq!(brute_force_vstep(&[0.7], 0.5).unwrap(), vec![false]);
        // u = β contributes zero; policy keeps it
        assert_eq!(brute_force_vstep(&[0.5, 0.1], 0.5).unwrap(), vec![true, true]);
        assert!(matches!(
            brute_force_vstep(&[0.0; 21], 0.5),
            Err(Error::OracleSize { n: 21, .. })
        ));
    }

    #[test]
    fn reweight_values() {
        let w = reweight_indicators(&[0.0, 0.5, 1.5], 1.0).unwrap();
        assert_eq!(w[0], 1.0);
        assert!(w[0] > w[1] && w[1] > w[2]);
        let u = [0.2, 0.4, 0.9];
        let mean = (0.2 + 0.4 + 0.9) / 3.0;
        let w = reweight_indicators(&u, mean).unwrap();
        for (wi, ui) in w.iter().zip(u) {
            assert!((wi - (-ui / mean).exp()).abs() < 1e-15);
        }
        assert!(reweight_indicators(&u, 0.0).is_err());
    }

    fn naive_objective(u: &[f64], v: &[bool], beta: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..u.len() {
            if v[i] {
                total += u[i];
                total -= beta;
            }
        }
        total
    }

    proptest! {
        #[test]
        fn objective_matches_naive_loop(u in prop::collection::vec(0.0f64..5.0, 1..40), beta in 0.0f64..5.0, bits in any::<u64>()) {
            let v: Vec<bool> = (0..u.len()).map(|i| bits >> (i % 64) & 1 == 1).collect();
            prop_assert!((objective_value(&u, &v, beta) - naive_objective(&u, &v, beta)).abs() <= 1e-12);
        }

        #[test]
        fn exact_cardinality(u in prop::collection::vec(0.0f64..1.0, 1..200), p in 0.001f64..=1.0) {
            let (beta, count) = compute_beta(&u, p).unwrap();
            let v = vstep(&u, beta, count).unwrap();
            prop_assert_eq!(v.iter().filter(|&&b| b).count(), selection_count(u.len(), p));
            for (ui, vi) in u.iter().zip(&v) {
                if *vi { prop_assert!(*ui <= beta); } else { prop_assert!(*ui >= beta); }
            }
        }

        #[test]
        fn selection_depends_only_on_ranks(u in prop::collection::vec(0.0f64..3.0, 1..60), p in 0.05f64..=1.0) {
            let (b1, c1) = compute_beta(&u, p).unwrap();
            let mapped: Vec<f64> = u.iter().map(|x| (2.0 * x).exp() + 1.0).collect();
            let (b2, c2) = compute_beta(&mapped, p).unwrap();
            prop_assert_eq!(vstep(&u, b1, c1).unwrap(), vstep(&mapped, b2, c2).unwrap());
        }

        #[test]
        fn schedule_monotone_and_concave(p0 in 0.01f64..0.99, h in 0.05f64..10.0, horizon in 1usize..200) {
            let vals: Vec<f64> = (0..=horizon).map(|t| schedule_p(t, horizon, p0, h).unwrap()).collect();
            prop_assert!((vals[0] - p0).abs() <= 1e-12);
            prop_assert!((vals[horizon] - 1.0).abs() <= 1e-12);
            for w in vals.windows(2) {
                prop_assert!(w[1] > w[0]);
            }
            for w in vals.windows(3) {
                prop_assert!(w[2] - w[1] <= w[1] - w[0] + 1e-12);
            }
        }
    }
}
