//! Pluggable attack strategies: label-flipping update providers,
//! lowest-accuracy-selecting aggregators, and contrarian verifiers.
//!
//! Malicious participants attack content, not the wire format: every
//! message they emit is well-formed and correctly signed.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate, candidate_message, score_local_updates, AggregationError, CandidateGlobalUpdate,
    LocalUpdateMsg,
};
use crate::chain::{ApprovedUpdate, ParticipantId, SignatureScheme};
use crate::learner::{Dataset, ModelSpec};
use crate::params::ParameterVector;
use crate::seeds::rng_for;

/// Which roles a malicious participant subverts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    /// Actual fraction of malicious participants in the population.
    pub malicious_fraction: f64,
    /// Label flips applied to malicious providers' training data.
    pub flip_pairs: Vec<(usize, usize)>,
    pub poison_updates: bool,
    pub malicious_aggregators: bool,
    pub malicious_verifiers: bool,
}

impl AdversaryConfig {
    /// No adversary at all.
    pub fn disabled() -> Self {
        Self {
            malicious_fraction: 0.0,
            flip_pairs: Vec::new(),
            poison_updates: false,
            malicious_aggregators: false,
            malicious_verifiers: false,
        }
    }

    /// All three strategies on, with the given flip pairs.
    pub fn full(malicious_fraction: f64, flip_pairs: Vec<(usize, usize)>) -> Self {
        Self {
            malicious_fraction,
            flip_pairs,
            poison_updates: true,
            malicious_aggregators: true,
            malicious_verifiers: true,
        }
    }

    pub fn is_active(&self) -> bool {
        self.malicious_fraction > 0.0
            && (self.poison_updates || self.malicious_aggregators || self.malicious_verifiers)
    }
}

/// Relabels every sample whose label equals a flip source to the flip
/// target; features are untouched.
pub fn poison_dataset(data: &Dataset, flip_pairs: &[(usize, usize)]) -> Dataset {
    let labels = data
        .labels
        .iter()
        .map(|&label| {
            flip_pairs
                .iter()
                .find(|&&(src, _)| src == label)
                .map_or(label, |&(_, dst)| dst)
        })
        .collect();
    Dataset {
        features: data.features.clone(),
        labels,
        classes: data.classes,
    }
}

/// Contrarian vote: the complement of the honest bit.
pub fn malicious_vote(honest_vote: bool) -> bool {
    !honest_vote
}

/// Picks `floor(f * n)` distinct malicious ids uniformly, fixed for the
/// whole run.
pub fn assign_malicious(n: usize, f_actual: f64, seed: u64) -> BTreeSet<ParticipantId> {
    assert!((0.0..1.0).contains(&f_actual), "fraction outside [0, 1)");
    let count = (f_actual * n as f64).floor() as usize;
    let mut ids: Vec<ParticipantId> = (0..n as u64).collect();
    ids.shuffle(&mut rng_for(seed));
    ids.truncate(count);
    ids.into_iter().collect()
}

/// Malicious aggregator: uniform-random 3c sample (no stake weighting),
/// score against the aggregator's own subset, aggregate the c updates
/// with the lowest accuracy (ties by ascending provider id).
#[allow(clippy::too_many_arguments)]
pub fn malicious_aggregate(
    aggregator_id: ParticipantId,
    inbox: &[LocalUpdateMsg],
    spec: &ModelSpec,
    w: &ParameterVector,
    subset: &Dataset,
    c: usize,
    round: u64,
    seed: u64,
    scheme: &dyn SignatureScheme,
) -> Result<CandidateGlobalUpdate, AggregationError> {
    let wanted = 3 * c;
    if inbox.len() < wanted {
        return Err(AggregationError::TooFewUpdates {
            got: inbox.len(),
            needed: wanted,
        });
    }
    let mut order: Vec<usize> = (0..inbox.len()).collect();
    order.shuffle(&mut rng_for(seed));
    let sampled: Vec<LocalUpdateMsg> =
        order[..wanted].iter().map(|&i| inbox[i].clone()).collect();
    let mut scored = score_local_updates(spec, w, &sampled, subset);
    scored.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap()
            .then(a.0.provider_id.cmp(&b.0.provider_id))
    });
    let selected: Vec<LocalUpdateMsg> = scored[..c].iter().map(|(m, _)| m.clone()).collect();
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
