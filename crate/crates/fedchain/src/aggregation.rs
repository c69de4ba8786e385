//! Aggregator pipeline: stake-filtered sampling of local updates,
//! median-based accuracy testing, softmax selection and averaging into one
//! candidate global update.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chain::{
    payload_bytes, ApprovedUpdate, ParticipantId, Signature, SignatureScheme, StakeLedger,
};
use crate::compression::{densify, SparseUpdate};
use crate::learner::{evaluate, Dataset, ModelSpec};
use crate::params::ParameterVector;
use crate::seeds::rng_for;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("need at least {needed} local updates, got {got}")]
    TooFewUpdates { got: usize, needed: usize },
    #[error("selection pool of {got} smaller than c = {c}")]
    PoolTooSmall { got: usize, c: usize },
    #[error("update dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("signing failed: {0}")]
    Sign(#[from] crate::chain::ChainError),
}

/// A provider's signed sparse local update as received by aggregators.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdateMsg {
    pub provider_id: ParticipantId,
    pub update: SparseUpdate,
    pub signature: Signature,
}

/// Canonical bytes a provider signs over its sparse update.
pub fn update_message(round: u64, provider_id: ParticipantId, update: &SparseUpdate) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"fedchain-local-update");
    buf.extend_from_slice(&round.to_be_bytes());
    buf.extend_from_slice(&provider_id.to_be_bytes());
    buf.extend_from_slice(&(update.dim as u64).to_be_bytes());
    buf.extend_from_slice(&update.declared_sparsity.to_bits().to_be_bytes());
    buf.extend_from_slice(&(update.indices.len() as u64).to_be_bytes());
    for &i in &update.indices {
        buf.extend_from_slice(&(i as u64).to_be_bytes());
    }
    for &v in &update.values {
        buf.extend_from_slice(&v.to_bits().to_be_bytes());
    }
    buf
}

/// One aggregator's signed candidate global update.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGlobalUpdate {
    pub aggregator_id: ParticipantId,
    pub update: ParameterVector,
    pub provider_ids: Vec<ParticipantId>,
    pub signature: Signature,
}

impl CandidateGlobalUpdate {
    pub fn as_payload(&self) -> ApprovedUpdate {
        ApprovedUpdate {
            global_update: self.update.clone(),
            aggregator_id: self.aggregator_id,
            provider_ids: self.provider_ids.clone(),
        }
    }
}

/// Bytes an aggregator signs over its candidate.
pub fn candidate_message(round: u64, candidate: &ApprovedUpdate) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"fedchain-candidate");
    buf.extend_from_slice(&round.to_be_bytes());
    buf.extend_from_slice(&payload_bytes(candidate));
    buf
}

fn weighted_sample_without_replacement(
    weights: &[f64],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let mut point = rng.gen_range(0.0..total);
        let mut chosen = remaining.len() - 1;
        for (slot, &i) in remaining.iter().enumerate() {
            if point < weights[i] {
                chosen = slot;
                break;
            }
            point -= weights[i];
        }
        picked.push(remaining.remove(chosen));
    }
    picked
}

/// Samples `3c` distinct messages without replacement, with selection
/// weight `ln(1 + stake(provider))`. Deterministic per seed.
pub fn stake_filter_sample(
    inbox: &[LocalUpdateMsg],
    ledger: &StakeLedger,
    c: usize,
    seed: u64,
) -> Result<Vec<LocalUpdateMsg>, AggregationError> {
    let wanted = 3 * c;
    if inbox.len() < wanted {
        return Err(AggregationError::TooFewUpdates {
            got: inbox.len(),
            needed: wanted,
        });
    }
    if inbox.len() == wanted {
        return Ok(inbox.to_vec());
    }
    let weights: Vec<f64> = inbox
        .iter()
        .map(|m| (1.0 + ledger.stake(m.provider_id) as f64).ln())
        .collect();
    let mut rng = rng_for(seed);
    let picked = weighted_sample_without_replacement(&weights, wanted, &mut rng);
    Ok(picked.into_iter().map(|i| inbox[i].clone()).collect())
}

/// Scores each update by applying it to a copy of the current model and
/// measuring inference accuracy on the aggregator's evaluation subset.
pub fn score_local_updates(
    spec: &ModelSpec,
    w: &ParameterVector,
    sampled: &[LocalUpdateMsg],
    subset: &Dataset,
) -> Vec<(LocalUpdateMsg, f64)> {
    assert!(!subset.is_empty(), "scoring subset must be nonempty");
    sampled
        .iter()
        .map(|msg| {
            let candidate_model = w
                .add(&densify(&msg.update))
                .expect("update dimension matches model");
            let q = evaluate(spec, &candidate_model, subset);
            (msg.clone(), q)
        })
        .collect()
}

/// Sorts descending by score (ties broken by ascending provider id) and
/// keeps the elements strictly before the median position.
pub fn median_partition(scored: &[(LocalUpdateMsg, f64)]) -> Vec<(LocalUpdateMsg, f64)> {
    let mut sorted: Vec<&(LocalUpdateMsg, f64)> = scored.iter().collect();
    sorted.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(a.0.provider_id.cmp(&b.0.provider_id))
    });
    let keep = sorted.len() / 2;
    sorted[..keep].iter().map(|&entry| entry.clone()).collect()
}

/// Draws `c` distinct updates sequentially; at each draw the selection
/// probability of a remaining update is `exp(q) / sum(exp(q))` over the
/// remaining pool.
pub fn softmax_select(
    pool: &[(LocalUpdateMsg, f64)],
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LocalUpdateMsg>, AggregationError> {
    if pool.len() < c {
        return Err(AggregationError::PoolTooSmall { got: pool.len(), c });
    }
    let weights: Vec<f64> = pool.iter().map(|(_, q)| q.exp()).collect();
    let picked = weighted_sample_without_replacement(&weights, c, rng);
    Ok(picked.into_iter().map(|i| pool[i].0.clone()).collect())
}

/// Elementwise mean of the densified selected updates.
pub fn aggregate(selected: &[LocalUpdateMsg]) -> Result<ParameterVector, AggregationError> {
    assert!(!selected.is_empty());
    let dim = selected[0].update.dim;
    let mut sum = ParameterVector::zeros(dim);
    for msg in selected {
        if msg.update.dim != dim {
            return Err(AggregationError::DimMismatch(msg.update.dim, dim));
        }
        sum = sum
            .add(&densify(&msg.update))
            .map_err(|_| AggregationError::DimMismatch(msg.update.dim, dim))?;
    }
    Ok(sum.scale(1.0 / selected.len() as f64))
}

/// Aggregator pipeline configuration.
#[derive(Debug, Clone, Copy)]
pub struct AggregatorConfig {
    /// Number of local updates a global update must contain.
    pub c: usize,
    /// Minimum verified inbox size before aggregation starts.
    pub min_local_updates: usize,
}

impl AggregatorConfig {
    pub fn with_default_min(c: usize) -> Self {
        Self {
            c,
            min_local_updates: 3 * c,
        }
    }
}

/// Full honest-aggregator pipeline: verify signatures, stake-filter,
/// score, median-partition, softmax-select, average and sign.
#[allow(clippy::too_many_arguments)]
pub fn run_aggregator(
    aggregator_id: ParticipantId,
    inbox: &[LocalUpdateMsg],
    spec: &ModelSpec,
    w: &ParameterVector,
    subset: &Dataset,
    ledger: &StakeLedger,
    cfg: &AggregatorConfig,
    round: u64,
    seed: u64,
    scheme: &dyn SignatureScheme,
) -> Result<CandidateGlobalUpdate, AggregationError> {
    let verified: Vec<LocalUpdateMsg> = inbox
        .iter()
        .filter(|m| {
            scheme.verify(
                m.provider_id,
                &update_message(round, m.provider_id, &m.update),
                &m.signature,
            )
        })
        .cloned()
        .collect();
    if verified.len() < cfg.min_local_updates {
        return Err(AggregationError::TooFewUpdates {
            got: verified.len(),
            needed: cfg.min_local_updates,
        });
    }
    let mut rng = rng_for(seed);
    let sample_seed = rng.gen::<u64>();
    let sampled = stake_filter_sample(&verified, ledger, cfg.c, sample_seed)?;
    let scored = score_local_updates(spec, w, &sampled, subset);
    let upper_half = median_partition(&scored);
    let selected = softmax_select(&upper_half, cfg.c, &mut rng)?;
    let update = aggregate(&selected)?;
    let provider_ids: Vec<ParticipantId> = selected.iter().map(|m| m.provider_id).collect();
    let payload = ApprovedUpdate {
        global_update: update.clone(),
        aggregator_id,
        provider_ids: provider_ids.clone(),
    };
    let signature = scheme.sign(aggregator_id, &candidate_message(round, &payload))?;
    Ok(CandidateGlobalUpdate {
        aggregator_id,
        update,
        provider_ids,
        signature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::KeyedHashScheme;
    use crate::compression::top_k_sparsify;
    use crate::learner::{init_model, make_synthetic_dataset, ModelKind};
    use std::collections::BTreeMap;

    fn msg(provider_id: u64, values: &[f64]) -> LocalUpdateMsg {
        let d = ParameterVector::new(values.to_vec()).unwrap();
        let (update, _) = top_k_sparsify(&d, 0.0).unwrap();
        LocalUpdateMsg {
            provider_id,
            update,
            signature: Signature([0u8; 32]),
        }
    }

    #[test]
    fn stake_filter_keeps_everything_when_exact() {
        let inbox: Vec<LocalUpdateMsg> = (0..6).map(|i| msg(i, &[1.0, 2.0])).collect();
        let ledger = StakeLedger::uniform(6, 10);
        let sampled = stake_filter_sample(&inbox, &ledger, 2, 0).unwrap();
        assert_eq!(sampled, inbox);
        assert!(stake_filter_sample(&inbox[..5], &ledger, 2, 0).is_err());
    }

    #[test]
    fn stake_filter_uniform_stakes_sample_uniformly() {
        let inbox: Vec<LocalUpdateMsg> = (0..12).map(|i| msg(i, &[1.0])).collect();
        let ledger = StakeLedger::uniform(12, 10);
        let c = 2; // 3c = 6 of 12
        let trials = 4000;
        let mut counts = vec![0f64; 12];
        for seed in 0..trials {
            for m in stake_filter_sample(&inbox, &ledger, c, seed).unwrap() {
                counts[m.provider_id as usize] += 1.0;
            }
        }
        // Each update selected with frequency 3c/|D| = 0.5; per-update count
        // is Binomial(trials, 0.5), sigma = sqrt(trials * 0.25).
        let expected = trials as f64 * 0.5;
        let sigma = (trials as f64 * 0.25).sqrt();
        for (i, count) in counts.iter().enumerate() {
            assert!(
                (count - expected).abs() < 3.5 * sigma,
                "provider {i}: {count} vs {expected}"
            );
        }
    }

    #[test]
    fn stake_filter_overwhelming_stake_is_nearly_always_selected() {
        let inbox: Vec<LocalUpdateMsg> = (0..7).map(|i| msg(i, &[1.0])).collect();
        let mut stakes: BTreeMap<u64, u64> = (0..7u64).map(|id| (id, 10)).collect();
        stakes.insert(0, 1_000_000);
        let ledger = StakeLedger::from_stakes(stakes);
        let mut hits = 0;
        let trials = 500;
        for seed in 0..trials {
            let sampled = stake_filter_sample(&inbox, &ledger, 2, seed).unwrap();
            if sampled.iter().any(|m| m.provider_id == 0) {
                hits += 1;
            }
        }
        assert!(hits as f64 / trials as f64 > 0.99, "hit rate {hits}/{trials}");
    }

    #[test]
    fn scoring_zero_update_equals_model_accuracy() {
        let spec = ModelSpec::new(3, 2, ModelKind::SoftmaxRegression).unwrap();
        let w = init_model(1, &spec);
        let subset = make_synthetic_dataset(2, 2, 10, 3, 0.5).unwrap();
        // A tiny but nonzero update barely moves the model; an exactly-zero
        // update is forbidden by the sparse type, so compare via a direct
        // evaluate call instead.
        let base = evaluate(&spec, &w, &subset);
        let m = msg(0, &(0..spec.param_count()).map(|_| 1e-12).collect::<Vec<_>>());
        let scored = score_local_updates(&spec, &w, &[m.clone(), m], &subset);
        assert_eq!(scored[0].1, base);
        assert_eq!(scored[0].1, scored[1].1);
    }

    #[test]
    fn median_partition_sizes_and_ties() {
        // 3c = 15 -> 7 kept.
        let scored: Vec<(LocalUpdateMsg, f64)> = (0..15)
            .map(|i| (msg(i, &[1.0]), 0.5 + 0.01 * (i % 5) as f64))
            .collect();
        let kept = median_partition(&scored);
        assert_eq!(kept.len(), 7);
        // The minimum-q element never survives.
        let min_q = scored
            .iter()
            .map(|(_, q)| *q)
            .fold(f64::MAX, f64::min);
        assert!(kept.iter().all(|(_, q)| *q > min_q));
        // All equal scores: first half by ascending id.
        let tied: Vec<(LocalUpdateMsg, f64)> =
            (0..6).map(|i| (msg(5 - i, &[1.0]), 0.7)).collect();
        let kept = median_partition(&tied);
        let ids: Vec<u64> = kept.iter().map(|(m, _)| m.provider_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn softmax_two_element_probability() {
        // q = (1.0, 0.0), single draw: p(first) = e / (e + 1) ~ 0.731.
        let pool = vec![(msg(0, &[1.0]), 1.0), (msg(1, &[1.0]), 0.0)];
        let trials = 20_000;
        let mut first = 0;
        for seed in 0..trials {
            let mut rng = rng_for(seed);
            let picked = softmax_select(&pool, 1, &mut rng).unwrap();
            if picked[0].provider_id == 0 {
                first += 1;
            }
        }
        let p = first as f64 / trials as f64;
        let expect = 1f64.exp() / (1f64.exp() + 1.0);
        assert!((p - expect).abs() < 0.015, "p = {p}, expect {expect}");
    }

    #[test]
    fn softmax_select_all_when_c_equals_pool() {
        let pool: Vec<(LocalUpdateMsg, f64)> =
            (0..4).map(|i| (msg(i, &[1.0]), 0.5)).collect();
        let mut rng = rng_for(0);
        let picked = softmax_select(&pool, 4, &mut rng).unwrap();
        let mut ids: Vec<u64> = picked.iter().map(|m| m.provider_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert!(softmax_select(&pool, 5, &mut rng).is_err());
    }

    #[test]
    fn aggregate_mean() {
        let msgs = vec![msg(0, &[2.0, 1e-9]), msg(1, &[1e-9, 2.0])];
        let g = aggregate(&msgs).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
        assert!((g[1] - 1.0).abs() < 1e-9);
        // c identical updates -> the update itself.
        let same = vec![msg(0, &[3.0, -1.0]), msg(1, &[3.0, -1.0])];
        let g = aggregate(&same).unwrap();
        assert_eq!(g.as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn aggregate_matches_independent_summation_order() {
        let mut rng = rng_for(33);
        let msgs: Vec<LocalUpdateMsg> = (0..5)
            .map(|i| {
                let vals: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                msg(i, &vals)
            })
            .collect();
        let g = aggregate(&msgs).unwrap();
        // Brute-force oracle: per-coordinate sum in reverse message order.
        for j in 0..8 {
            let mut total = 0.0;
            for m in msgs.iter().rev() {
                total += densify(&m.update)[j];
            }
            assert!((g[j] - total / 5.0).abs() < 1e-12);
        }
        // Permutation invariance up to float associativity at this scale.
        let mut reversed = msgs.clone();
        reversed.reverse();
        let g2 = aggregate(&reversed).unwrap();
        for j in 0..8 {
            assert!((g[j] - g2[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn run_aggregator_pipeline() {
        let spec = ModelSpec::new(4, 3, ModelKind::SoftmaxRegression).unwrap();
        let scheme = KeyedHashScheme::new(5, 0..20);
        let ledger = StakeLedger::uniform(20, 10);
        let w = init_model(3, &spec);
        let subset = make_synthetic_dataset(9, 3, 8, 4, 0.5).unwrap();
        let round = 2;
        let mut rng = rng_for(77);
        let inbox: Vec<LocalUpdateMsg> = (0..9u64)
            .map(|id| {
                let vals: Vec<f64> =
                    (0..spec.param_count()).map(|_| rng.gen_range(-0.1..0.1)).collect();
                let (update, _) =
                    top_k_sparsify(&ParameterVector::new(vals).unwrap(), 0.5).unwrap();
                let signature = scheme
                    .sign(id, &update_message(round, id, &update))
                    .unwrap();
                LocalUpdateMsg {
                    provider_id: id,
                    update,
                    signature,
                }
            })
            .collect();
        let cfg = AggregatorConfig::with_default_min(3);
        let out = run_aggregator(
            15, &inbox, &spec, &w, &subset, &ledger, &cfg, round, 42, &scheme,
        )
        .unwrap();
        assert_eq!(out.provider_ids.len(), 3);
        assert!(out
            .provider_ids
            .iter()
            .all(|id| inbox.iter().any(|m| m.provider_id == *id)));
        // Deterministic per (inbox, seed).
        let again = run_aggregator(
            15, &inbox, &spec, &w, &subset, &ledger, &cfg, round, 42, &scheme,
        )
        .unwrap();
        assert_eq!(out, again);

        // One unverifiable signature is dropped, not fatal.
        let mut tampered = inbox.clone();
        tampered.push(LocalUpdateMsg {
            provider_id: 10,
            update: tampered[0].update.clone(),
            signature: Signature([1u8; 32]),
        });
        let filtered = run_aggregator(
            15, &tampered, &spec, &w, &subset, &ledger, &cfg, round, 42, &scheme,
        )
        .unwrap();
        assert_eq!(filtered, out);
        // But an inbox that only reaches the minimum through an invalid
        // message is rejected.
        let mut short = inbox[..8].to_vec();
        short.push(tampered.last().unwrap().clone());
        assert!(matches!(
            run_aggregator(15, &short, &spec, &w, &subset, &ledger, &cfg, round, 42, &scheme),
            Err(AggregationError::TooFewUpdates { got: 8, needed: 9 })
        ));
    }
}
