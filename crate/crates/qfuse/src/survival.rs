//! Cox partial-likelihood loss and concordance-index evaluation.

use crate::error::SurvivalError;
use serde::{Deserialize, Serialize};

/// Observed follow-up for one patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    /// Follow-up time, must be positive and finite.
    pub time: f64,
    /// True when the event was observed; false means censored.
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool) -> Self {
        SurvivalRecord { time, event }
    }
}

fn validate(etas: &[f64], records: &[SurvivalRecord]) -> Result<(), SurvivalError> {
    if etas.len() != records.len() {
        return Err(SurvivalError::LengthMismatch(etas.len(), records.len()));
    }
    for r in records {
        if !(r.time > 0.0 && r.time.is_finite()) {
            return Err(SurvivalError::NonPositiveTime(r.time));
        }
    }
    Ok(())
}

/// Negative log Cox partial likelihood with Breslow handling of tied event
/// times: sum over event patients of -(eta_i - log sum_{t_j >= t_i} e^eta_j).
/// A batch without events contributes zero loss.
pub fn cox_partial_likelihood(
    etas: &[f64],
    records: &[SurvivalRecord],
) -> Result<f64, SurvivalError> {
    if etas.is_empty() {
        return Err(SurvivalError::EmptyInput);
    }
    validate(etas, records)?;
    if !records.iter().any(|r| r.event) {
        log::warn!("cox_partial_likelihood: all records censored, loss is 0");
        return Ok(0.0);
    }
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let events: Vec<bool> = records.iter().map(|r| r.event).collect();
    let (loss, _) = cox_nll_value_grad(etas, &times, &events);
    Ok(loss)
}

/// Loss and gradient of the Cox negative log partial likelihood.
///
/// Risk sets are formed within the given batch. Exponentials are stabilized
/// by the max risk score. Inputs are assumed validated.
pub(crate) fn cox_nll_value_grad(
    etas: &[f64],
    times: &[f64],
    events: &[bool],
) -> (f64, Vec<f64>) {
    let n = etas.len();
    let mut grad = vec![0.0; n];
    if n == 0 || !events.iter().any(|&e| e) {
        return (0.0, grad);
    }
    let max_eta = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = etas.iter().map(|&e| (e - max_eta).exp()).collect();

    // ascending time order; ties grouped
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());

    // Suffix sums of exp(eta - max) give each group's risk-set denominator.
    let mut loss = 0.0;
    let mut group_denoms: Vec<(usize, usize, f64, usize)> = Vec::new(); // (start, end, denom, events)
    {
        let mut suffix = vec![0.0; n + 1];
        for i in (0..n).rev() {
            suffix[i] = suffix[i + 1] + exps[order[i]];
        }
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j < n && times[order[j]] == times[order[i]] {
                j += 1;
            }
            let denom = suffix[i];
            let mut n_events = 0;
            for &idx in &order[i..j] {
                if events[idx] {
                    n_events += 1;
                    loss += denom.ln() + max_eta - etas[idx];
                }
            }
            group_denoms.push((i, j, denom, n_events));
            i = j;
        }
    }

    // grad_k = exp(eta_k) * sum_{event groups with t <= t_k} d_g / denom_g - [event_k]
    let mut cum = 0.0;
    for &(start, end, denom, n_events) in &group_denoms {
        if n_events > 0 {
            cum += n_events as f64 / denom;
        }
        for &idx in &order[start..end] {
            grad[idx] = exps[idx] * cum - if events[idx] { 1.0 } else { 0.0 };
        }
    }
    (loss, grad)
}

/// Three-way tally of permissible pairs.
#[derive(Debug, Default, Clone, Copy)]
struct PairCounts {
    concordant: u64,
    tied: u64,
    permissible: u64,
}

impl PairCounts {
    fn cindex(self) -> Result<f64, SurvivalError> {
        if self.permissible == 0 {
            return Err(SurvivalError::NoPermissiblePairs);
        }
        // integer numerator keeps the fast path and the brute force bit-equal
        Ok((2 * self.concordant + self.tied) as f64 / (2 * self.permissible) as f64)
    }
}

/// Harrell's concordance index.
///
/// A pair (i, j) is permissible when t_i < t_j and patient i had an observed
/// event; pairs with equal times are excluded. Concordant pairs (eta_i >
/// eta_j) count 1, tied risk scores count 1/2. Runs in O(n log n) via a
/// Fenwick tree over rank-compressed risk scores.
pub fn concordance_index(
    etas: &[f64],
    records: &[SurvivalRecord],
) -> Result<f64, SurvivalError> {
    if etas.len() < 2 {
        return Err(SurvivalError::LengthMismatch(etas.len(), 2));
    }
    validate(etas, records)?;

    let n = etas.len();
    let mut ranks = rank_compress(etas);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[a].time.partial_cmp(&records[b].time).unwrap());

    let max_rank = *ranks.iter().max().unwrap() + 1;
    let mut tree = Fenwick::new(max_rank);
    let mut counts = PairCounts::default();

    // walk time groups from the latest backwards; the tree holds all
    // strictly-later patients when a group's event members query it
    let mut hi = n;
    while hi > 0 {
        let mut lo = hi;
        while lo > 0 && records[order[lo - 1]].time == records[order[hi - 1]].time {
            lo -= 1;
        }
        let inserted = tree.total();
        if inserted > 0 {
            for &idx in &order[lo..hi] {
                if !records[idx].event {
                    continue;
                }
                let r = ranks[idx];
                let below = tree.prefix(r); // later patients with lower eta
                let equal = tree.at(r);
                counts.permissible += inserted;
                counts.concordant += below;
                counts.tied += equal;
            }
        }
        for &idx in &order[lo..hi] {
            tree.add(ranks[idx], 1);
        }
        hi = lo;
    }
    ranks.clear();
    counts.cindex()
}

/// Literal O(n^2) pair enumeration with the same permissibility, tie and
/// censoring rules as [`concordance_index`]. Kept as the oracle the fast
/// path is checked against.
pub fn concordance_bruteforce(
    etas: &[f64],
    records: &[SurvivalRecord],
) -> Result<f64, SurvivalError> {
    if etas.len() < 2 {
        return Err(SurvivalError::LengthMismatch(etas.len(), 2));
    }
    validate(etas, records)?;
    let n = etas.len();
    let mut counts = PairCounts::default();
    for i in 0..n {
        if !records[i].event {
            continue;
        }
        for j in 0..n {
            if records[i].time < records[j].time {
                counts.permissible += 1;
                if etas[i] > etas[j] {
                    counts.concordant += 1;
                } else if etas[i] == etas[j] {
                    counts.tied += 1;
                }
            }
        }
    }
    counts.cindex()
}

/// Arithmetic mean of per-split c-indexes (a report row's MEAN column).
pub fn aggregate_mean(per_split: &[f64]) -> Result<f64, SurvivalError> {
    if per_split.is_empty() {
        return Err(SurvivalError::EmptyInput);
    }
    Ok(per_split.iter().sum::<f64>() / per_split.len() as f64)
}

/// Round to 3 decimals, the report precision.
pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn rank_compress(values: &[f64]) -> Vec<usize> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    values
        .iter()
        .map(|v| sorted.partition_point(|x| x < v))
        .collect()
}

struct Fenwick {
    tree: Vec<u64>,
    total: u64,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick {
            tree: vec![0; n + 1],
            total: 0,
        }
    }

    fn add(&mut self, i: usize, v: u64) {
        let mut i = i + 1;
        while i < self.tree.len() {
            self.tree[i] += v;
            i += i & i.wrapping_neg();
        }
        self.total += v;
    }

    /// Count of inserted values with rank strictly below `i`.
    fn prefix(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }

    fn at(&self, i: usize) -> u64 {
        self.prefix(i + 1) - self.prefix(i)
    }

    fn total(&self) -> u64 {
        self.total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn rec(time: f64, event: bool) -> SurvivalRecord {
        SurvivalRecord::new(time, event)
    }

    #[test]
    fn single_event_patient_has_zero_loss() {
        let loss = cox_partial_likelihood(&[1.3], &[rec(2.0, true)]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn all_censored_is_zero_loss() {
        let loss =
            cox_partial_likelihood(&[0.5, -0.5], &[rec(1.0, false), rec(2.0, false)]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn two_events_equal_scores_is_ln2() {
        let loss =
            cox_partial_likelihood(&[0.0, 0.0], &[rec(1.0, true), rec(2.0, true)]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            cox_partial_likelihood(&[0.0], &[]),
            Err(SurvivalError::LengthMismatch(1, 0))
        ));
        assert!(matches!(
            cox_partial_likelihood(&[0.0], &[rec(0.0, true)]),
            Err(SurvivalError::NonPositiveTime(_))
        ));
        assert!(matches!(
            cox_partial_likelihood(&[], &[]),
            Err(SurvivalError::EmptyInput)
        ));
    }

    #[test]
    fn cox_gradient_matches_finite_differences() {
        let mut s = Stream::new(42);
        for case in 0..20 {
            let n = 3 + case % 8;
            let etas: Vec<f64> = (0..n).map(|_| s.normal()).collect();
            let times: Vec<f64> = (0..n).map(|_| 1.0 + s.uniform() * 4.0).collect();
            let events: Vec<bool> = (0..n).map(|i| i == 0 || s.uniform() < 0.7).collect();
            let (_, grad) = cox_nll_value_grad(&etas, &times, &events);
            let step = 1e-6;
            for i in 0..n {
                let mut plus = etas.clone();
                plus[i] += step;
                let mut minus = etas.clone();
                minus[i] -= step;
                let (lp, _) = cox_nll_value_grad(&plus, &times, &events);
                let (lm, _) = cox_nll_value_grad(&minus, &times, &events);
                let fd = (lp - lm) / (2.0 * step);
                let rel = (grad[i] - fd).abs() / fd.abs().max(1.0);
                assert!(rel < 1e-4, "case {case} entry {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn cox_loss_drops_when_concordant_ordering_sharpens() {
        let records = [rec(1.0, true), rec(2.0, true), rec(3.0, true)];
        // eta aligned with risk: earlier death -> higher score
        let mild = [0.3, 0.0, -0.3];
        let sharp = [1.0, 0.0, -1.0];
        let l_mild = cox_partial_likelihood(&mild, &records).unwrap();
        let l_sharp = cox_partial_likelihood(&sharp, &records).unwrap();
        assert!(l_sharp < l_mild);
    }

    #[test]
    fn cox_one_parameter_family_minimum_at_zero_gradient() {
        // eta(s) = s * direction; at the minimizer over s the directional
        // finite difference must cross zero.
        let records = [
            rec(1.0, true),
            rec(2.0, true),
            rec(3.0, false),
            rec(4.0, true),
        ];
        // partially discordant direction, so the optimum over s is interior
        let dir = [1.0, -0.6, 0.2, -0.4];
        let loss_at = |s: f64| {
            let etas: Vec<f64> = dir.iter().map(|d| d * s).collect();
            let times: Vec<f64> = records.iter().map(|r| r.time).collect();
            let events: Vec<bool> = records.iter().map(|r| r.event).collect();
            cox_nll_value_grad(&etas, &times, &events).0
        };
        // crude 1-d minimization by scan, then check fd gradient at argmin
        let mut best = (f64::INFINITY, 0.0);
        let mut s = -6.0;
        while s <= 6.0 {
            let l = loss_at(s);
            if l < best.0 {
                best = (l, s);
            }
            s += 1e-3;
        }
        assert!(best.1.abs() < 5.9, "minimum not interior: s = {}", best.1);
        let h = 1e-5;
        let fd = (loss_at(best.1 + h) - loss_at(best.1 - h)) / (2.0 * h);
        assert!(fd.abs() < 1e-2, "fd at argmin: {fd}");
    }

    #[test]
    fn perfectly_concordant_scores() {
        let records = [rec(1.0, true), rec(2.0, true), rec(3.0, true)];
        let c = concordance_index(&[3.0, 2.0, 1.0], &records).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn worked_three_patient_example() {
        let records = [rec(2.0, true), rec(4.0, false), rec(3.0, true)];
        let etas = [0.8, 0.9, 0.5];
        let c = concordance_index(&etas, &records).unwrap();
        assert!((c - 1.0 / 3.0).abs() < 1e-15, "c {c}");
        let b = concordance_bruteforce(&etas, &records).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn all_tied_scores_give_half() {
        let records = [rec(1.0, true), rec(2.0, true), rec(3.0, false)];
        let c = concordance_index(&[0.7, 0.7, 0.7], &records).unwrap();
        assert_eq!(c, 0.5);
    }

    #[test]
    fn censored_earlier_time_forbids_the_pair() {
        let records = [rec(1.0, false), rec(2.0, true)];
        assert!(matches!(
            concordance_index(&[1.0, 0.0], &records),
            Err(SurvivalError::NoPermissiblePairs)
        ));
        assert!(matches!(
            concordance_bruteforce(&[1.0, 0.0], &records),
            Err(SurvivalError::NoPermissiblePairs)
        ));
    }

    #[test]
    fn equal_times_are_not_permissible() {
        let records = [rec(2.0, true), rec(2.0, true)];
        assert!(matches!(
            concordance_index(&[1.0, 0.0], &records),
            Err(SurvivalError::NoPermissiblePairs)
        ));
    }

    #[test]
    fn fast_equals_bruteforce_on_random_instances() {
        let mut s = Stream::new(7);
        for case in 0..200 {
            let n = 2 + (s.uniform() * 63.0) as usize;
            let censor_rate = s.uniform() * 0.6;
            let mut etas = Vec::with_capacity(n);
            let mut records = Vec::with_capacity(n);
            for _ in 0..n {
                // coarse grids inject ties in both times and scores
                etas.push((s.normal() * 4.0).round() / 4.0);
                let t = 1.0 + (s.uniform() * 20.0).floor();
                records.push(rec(t, s.uniform() >= censor_rate));
            }
            let fast = concordance_index(&etas, &records);
            let brute = concordance_bruteforce(&etas, &records);
            match (fast, brute) {
                (Ok(f), Ok(b)) => assert_eq!(f, b, "case {case}"),
                (Err(SurvivalError::NoPermissiblePairs), Err(SurvivalError::NoPermissiblePairs)) => {}
                (f, b) => panic!("case {case}: {f:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut s = Stream::new(9);
        let n = 40;
        let etas: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let records: Vec<SurvivalRecord> = (0..n)
            .map(|_| rec(1.0 + s.uniform() * 9.0, s.uniform() < 0.7))
            .collect();
        let base = concordance_index(&etas, &records).unwrap();
        let affine: Vec<f64> = etas.iter().map(|e| 2.0 * e + 1.0).collect();
        let expo: Vec<f64> = etas.iter().map(|e| e.exp()).collect();
        assert_eq!(base, concordance_index(&affine, &records).unwrap());
        assert_eq!(base, concordance_index(&expo, &records).unwrap());
    }

    #[test]
    fn cindex_stays_in_unit_interval() {
        let mut s = Stream::new(12);
        for _ in 0..50 {
            let n = 2 + (s.uniform() * 30.0) as usize;
            let etas: Vec<f64> = (0..n).map(|_| s.normal()).collect();
            let records: Vec<SurvivalRecord> = (0..n)
                .map(|_| rec(1.0 + (s.uniform() * 5.0).floor(), s.uniform() < 0.8))
                .collect();
            if let Ok(c) = concordance_index(&etas, &records) {
                assert!((0.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn table_row_means() {
        let crema = [0.863, 0.658, 0.687, 0.781, 0.775];
        let limoe = [0.795, 0.674, 0.771, 0.736, 0.578];
        assert_eq!(round3(aggregate_mean(&crema).unwrap()), 0.753);
        assert_eq!(round3(aggregate_mean(&limoe).unwrap()), 0.711);
        assert_eq!(aggregate_mean(&[0.42]).unwrap(), 0.42);
        assert!(matches!(
            aggregate_mean(&[]),
            Err(SurvivalError::EmptyInput)
        ));
    }
}
