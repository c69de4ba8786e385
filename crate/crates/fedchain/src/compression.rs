//! Top-k update sparsification with local residual accumulation.
//!
//! An update provider transmits only the largest-magnitude entries of its
//! local update; the untransmitted mass is kept in a per-participant
//! residual and folded into the next computed update before the next
//! sparsification, so nothing is ever lost.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamError, ParameterVector};

#[derive(Debug, Error, PartialEq)]
pub enum CompressionError {
    #[error("sparsity {s} keeps zero of {dim} entries")]
    NothingKept { s: f64, dim: usize },
    #[error("sparsity {0} outside [0, 1)")]
    InvalidSparsity(f64),
    #[error("invalid sparse update: {0}")]
    InvalidSparse(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Index/value pairs of a top-k-sparsified update.
///
/// Indices are strictly increasing; values are finite and nonzero. The
/// nominal support size is `round((1 - s) * dim)`; exact zeros in the
/// source update are dropped from the support, so the actual support may
/// be smaller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseUpdate {
    pub dim: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub declared_sparsity: f64,
}

impl SparseUpdate {
    pub fn validate(&self) -> Result<(), CompressionError> {
        if self.indices.len() != self.values.len() {
            return Err(CompressionError::InvalidSparse(format!(
                "{} indices vs {} values",
                self.indices.len(),
                self.values.len()
            )));
        }
        if !(0.0..1.0).contains(&self.declared_sparsity) {
            return Err(CompressionError::InvalidSparsity(self.declared_sparsity));
        }
        for pair in self.indices.windows(2) {
            if pair[1] <= pair[0] {
                return Err(CompressionError::InvalidSparse(format!(
                    "indices not strictly increasing at {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        if let Some(&last) = self.indices.last() {
            if last >= self.dim {
                return Err(CompressionError::InvalidSparse(format!(
                    "index {last} >= dim {}",
                    self.dim
                )));
            }
        }
        let k = nominal_support(self.dim, self.declared_sparsity);
        if self.indices.is_empty() || self.indices.len() > k {
            return Err(CompressionError::InvalidSparse(format!(
                "support size {} vs nominal {k}",
                self.indices.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite() || *v == 0.0) {
            return Err(CompressionError::InvalidSparse(
                "zero or non-finite value".into(),
            ));
        }
        Ok(())
    }
}

/// Nominal support size k = round-half-up((1 - s) * dim).
pub fn nominal_support(dim: usize, s: f64) -> usize {
    ((1.0 - s) * dim as f64 + 0.5).floor() as usize
}

/// Keeps the `round((1 - s) * dim)` entries of largest absolute value and
/// returns them with the residual (the input with kept entries zeroed).
/// Ties at the k-th magnitude keep the lower index. Exact zeros never
/// enter the support.
pub fn top_k_sparsify(
    d: &ParameterVector,
    s: f64,
) -> Result<(SparseUpdate, ParameterVector), CompressionError> {
    if !(0.0..1.0).contains(&s) {
        return Err(CompressionError::InvalidSparsity(s));
    }
    let dim = d.len();
    let k = nominal_support(dim, s);
    if k == 0 {
        return Err(CompressionError::NothingKept { s, dim });
    }
    let mut order: Vec<usize> = (0..dim).collect();
    // Descending |value|, lower index first on ties.
    order.sort_by(|&a, &b| {
        d[b].abs()
            .partial_cmp(&d[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..k].iter().copied().filter(|&i| d[i] != 0.0).collect();
    kept.sort_unstable();
    if kept.is_empty() {
        // All-zero update: transmit nothing but keep a well-formed message by
        // carrying the single lowest index with value zero is forbidden, so
        // callers treat this as an update with empty support via the error.
        return Err(CompressionError::InvalidSparse(
            "update has no nonzero entries".into(),
        ));
    }
    let values: Vec<f64> = kept.iter().map(|&i| d[i]).collect();
    let mut residual = d.clone();
    for &i in &kept {
        residual.as_mut_slice()[i] = 0.0;
    }
    let sparse = SparseUpdate {
        dim,
        indices: kept,
        values,
        declared_sparsity: s,
    };
    Ok((sparse, residual))
}

/// Elementwise sum of the stored residual and a newly computed update.
pub fn accumulate(
    residual: &ParameterVector,
    d_new: &ParameterVector,
) -> Result<ParameterVector, CompressionError> {
    Ok(residual.add(d_new)?)
}

/// Encodes a dense update without any compression: the support is every
/// nonzero entry. Returns `None` when the update is all zeros. Output
/// matches `top_k_sparsify` at s = 0 exactly.
pub fn dense_to_sparse(d: &ParameterVector) -> Option<SparseUpdate> {
    let indices: Vec<usize> = (0..d.len()).filter(|&i| d[i] != 0.0).collect();
    if indices.is_empty() {
        return None;
    }
    let values = indices.iter().map(|&i| d[i]).collect();
    Some(SparseUpdate {
        dim: d.len(),
        indices,
        values,
        declared_sparsity: 0.0,
    })
}

/// Expands a sparse update back to a dense length-`dim` vector.
pub fn densify(u: &SparseUpdate) -> ParameterVector {
    let mut out = ParameterVector::zeros(u.dim);
    let vals = out.as_mut_slice();
    for (&i, &v) in u.indices.iter().zip(&u.values) {
        vals[i] = v;
    }
    out
}

/// Step-function sparsity schedule: entries are `(start_round, s)` sorted by
/// start round; the last entry whose start is <= `round` applies.
pub fn sparsity_for_round(round: u64, schedule: &[(u64, f64)]) -> f64 {
    assert!(!schedule.is_empty(), "schedule must be nonempty");
    let mut s = schedule[0].1;
    for &(start, value) in schedule {
        if round >= start {
            s = value;
        } else {
            break;
        }
    }
    s
}

/// The step schedule `levels[i]` active for rounds `[i*period, (i+1)*period)`,
/// with the last level holding beyond the end.
pub fn periodic_schedule(levels: &[f64], period: u64) -> Vec<(u64, f64)> {
    levels
        .iter()
        .enumerate()
        .map(|(i, &s)| (i as u64 * period, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn worked_example() {
        // Brute-force sort of |d| = [3, 1, 0.5, 2] keeps indices 0 and 3.
        let d = pv(&[3.0, -1.0, 0.5, 2.0]);
        let (sparse, residual) = top_k_sparsify(&d, 0.5).unwrap();
        assert_eq!(sparse.indices, vec![0, 3]);
        assert_eq!(sparse.values, vec![3.0, 2.0]);
        assert_eq!(residual.as_slice(), &[0.0, -1.0, 0.5, 0.0]);
        sparse.validate().unwrap();
    }

    #[test]
    fn s_zero_keeps_all_nonzero() {
        let d = pv(&[1.0, 0.0, -2.0]);
        let (sparse, residual) = top_k_sparsify(&d, 0.0).unwrap();
        assert_eq!(sparse.indices, vec![0, 2]);
        assert!(residual.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(densify(&sparse).as_slice(), d.as_slice());
    }

    #[test]
    fn tie_prefers_lower_index() {
        let d = pv(&[1.0, -1.0]);
        let (sparse, _) = top_k_sparsify(&d, 0.5).unwrap();
        assert_eq!(sparse.indices, vec![0]);
        assert_eq!(sparse.values, vec![1.0]);
    }

    #[test]
    fn too_sparse_is_an_error() {
        let d = pv(&[1.0, 2.0]);
        assert!(matches!(
            top_k_sparsify(&d, 0.95),
            Err(CompressionError::NothingKept { .. })
        ));
    }

    #[test]
    fn conservation_is_exact() {
        let mut rng = crate::seeds::rng_for(42);
        use rand::Rng;
        for _ in 0..200 {
            let d = pv(&(0..31).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
            for &s in &[0.0, 0.5, 0.9] {
                let (sparse, residual) = top_k_sparsify(&d, s).unwrap();
                let rebuilt = densify(&sparse).add(&residual).unwrap();
                assert_eq!(rebuilt.as_slice(), d.as_slice());
                // Every kept magnitude >= every dropped magnitude.
                let min_kept = sparse.values.iter().map(|v| v.abs()).fold(f64::MAX, f64::min);
                let max_dropped = residual
                    .as_slice()
                    .iter()
                    .map(|v| v.abs())
                    .fold(0.0, f64::max);
                assert!(min_kept >= max_dropped);
            }
        }
    }

    #[test]
    fn two_round_conservation() {
        let d1 = pv(&[0.3, -0.9, 0.1, 0.7, 0.05]);
        let d2 = pv(&[-0.2, 0.4, 0.6, -0.1, 0.8]);
        let (t1, r1) = top_k_sparsify(&d1, 0.5).unwrap();
        let fed = accumulate(&r1, &d2).unwrap();
        let (t2, r2) = top_k_sparsify(&fed, 0.5).unwrap();
        let total = densify(&t1)
            .add(&densify(&t2))
            .unwrap()
            .add(&r2)
            .unwrap();
        let expect = d1.add(&d2).unwrap();
        for (a, b) in total.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn accumulate_basics() {
        let zero = ParameterVector::zeros(3);
        let a = pv(&[1.0, 2.0, 3.0]);
        let b = pv(&[0.5, -1.0, 0.0]);
        assert_eq!(accumulate(&zero, &a).unwrap(), a);
        let ab = accumulate(&accumulate(&zero, &a).unwrap(), &b).unwrap();
        assert_eq!(ab, a.add(&b).unwrap());
        assert!(accumulate(&zero, &pv(&[1.0])).is_err());
    }

    #[test]
    fn schedule_steps() {
        // MNIST default: [90%, 92.5%, 95%, 97.5%] switching every 50 rounds.
        let mnist = periodic_schedule(&[0.90, 0.925, 0.95, 0.975], 50);
        assert_eq!(sparsity_for_round(0, &mnist), 0.90);
        assert_eq!(sparsity_for_round(49, &mnist), 0.90);
        assert_eq!(sparsity_for_round(50, &mnist), 0.925);
        assert_eq!(sparsity_for_round(199, &mnist), 0.975);
        assert_eq!(sparsity_for_round(10_000, &mnist), 0.975);
        // CIFAR default: third step at round 120.
        let cifar = periodic_schedule(&[0.85, 0.875, 0.90, 0.925, 0.95], 60);
        assert_eq!(sparsity_for_round(120, &cifar), 0.90);
        // Single entry is constant.
        assert_eq!(sparsity_for_round(7, &[(0, 0.5)]), 0.5);
    }
}
