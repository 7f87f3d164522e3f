//! Federated averaging.
//!
//! The weighted mean is computed over a canonical ordering of the inputs
//! (sorted by sample count, then by parameter values), which makes the
//! result bit-identical under input permutation. Weights are the exact
//! rationals `n_k / N` rounded once to f64, so equal counts produce exactly
//! the same weights as the unweighted mean.

use std::cmp::Ordering;

use feddart::ParameterVector;

use crate::error::{FactError, Result};

/// Component-wise (weighted) mean of the client parameter vectors.
///
/// `weighted` uses each vector's `sample_count` as its weight; unweighted
/// treats every contribution equally. The output `sample_count` is the sum of
/// the input counts.
pub fn aggregate_fedavg(results: &[ParameterVector], weighted: bool) -> Result<ParameterVector> {
    if results.is_empty() {
        return Err(FactError::EmptyResults);
    }
    let len = results[0].len();
    for r in results {
        if r.len() != len {
            return Err(FactError::LengthMismatch(format!(
                "vector of length {} among vectors of length {len}",
                r.len()
            )));
        }
    }

    let counts: Vec<u64> = results
        .iter()
        .map(|r| if weighted { r.sample_count } else { 1 })
        .collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(FactError::ZeroWeight);
    }

    // Canonical summation order: identical multisets of contributions sum in
    // an identical sequence regardless of input order.
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| {
        counts[a]
            .cmp(&counts[b])
            .then_with(|| cmp_values(&results[a].values, &results[b].values))
    });

    let total_f = total as f64;
    let mut out = vec![0.0; len];
    for &k in &order {
        let weight = counts[k] as f64 / total_f;
        for (acc, v) in out.iter_mut().zip(&results[k].values) {
            *acc += weight * v;
        }
    }

    let sample_count = results.iter().map(|r| r.sample_count).sum();
    Ok(ParameterVector::new(out, sample_count))
}

fn cmp_values(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let ord = x.total_cmp(y);
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(values: &[f64], n: u64) -> ParameterVector {
        ParameterVector::new(values.to_vec(), n)
    }

    /// Straightforward reference: accumulate in input order, divide at the
    /// end. Deliberately different from the implementation path.
    fn brute_force_weighted_mean(results: &[ParameterVector], weighted: bool) -> Vec<f64> {
        let len = results[0].len();
        let mut numerator = vec![0.0; len];
        let mut denominator = 0.0;
        for r in results {
            let w = if weighted { r.sample_count as f64 } else { 1.0 };
            denominator += w;
            for (acc, v) in numerator.iter_mut().zip(&r.values) {
                *acc += w * v;
            }
        }
        numerator.iter().map(|v| v / denominator).collect()
    }

    #[test]
    fn mean_of_identical_vectors_is_the_vector() {
        let w = pv(&[1.5, -2.25, 0.0], 4);
        let out = aggregate_fedavg(&[w.clone(), w.clone()], false).unwrap();
        assert_eq!(out.values, w.values);
        assert_eq!(out.sample_count, 8);
    }

    #[test]
    fn weighted_example() {
        // (1*0 + 3*4)/4 = 3, (1*2 + 3*6)/4 = 5.
        let out = aggregate_fedavg(&[pv(&[0.0, 2.0], 1), pv(&[4.0, 6.0], 3)], true).unwrap();
        let oracle = brute_force_weighted_mean(&[pv(&[0.0, 2.0], 1), pv(&[4.0, 6.0], 3)], true);
        assert_eq!(out.values, vec![3.0, 5.0]);
        assert_eq!(out.values, oracle);
        assert_eq!(out.sample_count, 4);
    }

    #[test]
    fn single_client_returns_its_own_vector() {
        let w = pv(&[9.0, -1.0], 17);
        let out = aggregate_fedavg(&[w.clone()], true).unwrap();
        assert_eq!(out.values, w.values);
        assert_eq!(out.sample_count, 17);
    }

    #[test]
    fn errors_are_explicit() {
        assert!(matches!(
            aggregate_fedavg(&[], false),
            Err(FactError::EmptyResults)
        ));
        assert!(matches!(
            aggregate_fedavg(&[pv(&[1.0], 1), pv(&[1.0, 2.0], 1)], false),
            Err(FactError::LengthMismatch(_))
        ));
        assert!(matches!(
            aggregate_fedavg(&[pv(&[1.0], 0), pv(&[2.0], 0)], true),
            Err(FactError::ZeroWeight)
        ));
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let inputs = [
            pv(&[0.1, -3.7, 2.2], 5),
            pv(&[1.4, 0.3, -0.9], 12),
            pv(&[-2.0, 8.8, 0.05], 1),
            pv(&[0.33, 0.44, 0.55], 12),
        ];
        let base = aggregate_fedavg(&inputs, true).unwrap();
        let mut shuffled = inputs.to_vec();
        shuffled.reverse();
        let reversed = aggregate_fedavg(&shuffled, true).unwrap();
        assert_eq!(base.values, reversed.values);
        shuffled.swap(0, 2);
        let swapped = aggregate_fedavg(&shuffled, true).unwrap();
        assert_eq!(base.values, swapped.values);
    }

    #[test]
    fn equal_counts_match_unweighted_exactly() {
        let inputs = [
            pv(&[0.123456789, -7.0], 42),
            pv(&[3.333, 1.25], 42),
            pv(&[-0.5, 0.5], 42),
        ];
        let weighted = aggregate_fedavg(&inputs, true).unwrap();
        let unweighted = aggregate_fedavg(&inputs, false).unwrap();
        assert_eq!(weighted.values, unweighted.values);
    }

    #[test]
    fn close_to_brute_force_on_random_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        for _ in 0..200 {
            let clients = rng.gen_range(2..=20);
            let len = rng.gen_range(1..=64);
            let inputs: Vec<ParameterVector> = (0..clients)
                .map(|_| {
                    let values: Vec<f64> = (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect();
                    ParameterVector::new(values, rng.gen_range(1..=1000))
                })
                .collect();
            let out = aggregate_fedavg(&inputs, true).unwrap();
            let oracle = brute_force_weighted_mean(&inputs, true);
            for (a, b) in out.values.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn homogeneous_of_degree_one() {
        let inputs = [pv(&[0.5, -1.5], 3), pv(&[2.5, 4.0], 9)];
        let base = aggregate_fedavg(&inputs, true).unwrap();
        let c = -2.5;
        let scaled_inputs: Vec<ParameterVector> = inputs
            .iter()
            .map(|p| pv(&p.values.iter().map(|v| c * v).collect::<Vec<_>>(), p.sample_count))
            .collect();
        let scaled = aggregate_fedavg(&scaled_inputs, true).unwrap();
        for (s, b) in scaled.values.iter().zip(&base.values) {
            assert!((s - c * b).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_inputs_give_finite_output() {
        let out = aggregate_fedavg(&[pv(&[1e300, -1e300], 1), pv(&[-1e300, 1e300], 1)], false)
            .unwrap();
        assert!(out.values.iter().all(|v| v.is_finite()));
    }
}
