//! Verification and consensus: Krum scoring of candidate global updates,
//! the 2/3 vote rule, and the simplified three-stage voting protocol that
//! produces exactly one (possibly empty) block decision per round.
//!
//! The staged message exchange is modeled as a deterministic sequential
//! schedule (messages delivered in sender-id order); the outcome is a pure
//! function of the candidate set, the verifier set and the scores, so any
//! valid delivery order yields the same result.


use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{candidate_message, CandidateGlobalUpdate};
use crate::chain::{
    payload_bytes, vote_message, BlockHash, ParticipantId, SignatureScheme, SignedVote,
};

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("need at least 2 candidates for Krum, got {0}")]
    TooFewCandidates(usize),
    #[error("malicious fraction {0} outside [0, 1)")]
    InvalidFraction(f64),
    #[error("unknown candidate id {0} in a stage message")]
    UnknownCandidate(ParticipantId),
    #[error("signing failed: {0}")]
    Sign(#[from] crate::chain::ChainError),
}

/// Voting stages of the simplified protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PrePrepare,
    Prepare,
    Commit,
}

/// A staged protocol message. Only commit messages carry a vote.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMsg {
    pub stage: Stage,
    pub candidate_id: ParticipantId,
    pub vote: Option<bool>,
    pub sender_id: ParticipantId,
    pub signature: crate::chain::Signature,
}

/// Number of peers used in a Krum score:
/// `m = clamp(floor((1 - f) * |G|) - 2, 1, |G| - 1)`.
pub fn krum_neighbor_count(n_candidates: usize, f: f64) -> usize {
    let raw = ((1.0 - f) * n_candidates as f64).floor() as i64 - 2;
    raw.clamp(1, n_candidates as i64 - 1) as usize
}

/// Krum score of `candidates[index]`: the sum of squared Euclidean
/// distances to its `m` closest peers (ties broken by ascending
/// aggregator id). Lower is better.
pub fn krum_score(
    index: usize,
    candidates: &[(ParticipantId, crate::params::ParameterVector)],
    f: f64,
) -> Result<f64, ConsensusError> {
    if candidates.len() < 2 {
        return Err(ConsensusError::TooFewCandidates(candidates.len()));
    }
    if !(0.0..1.0).contains(&f) {
        return Err(ConsensusError::InvalidFraction(f));
    }
    let m = krum_neighbor_count(candidates.len(), f);
    let (_, me) = &candidates[index];
    let mut dists: Vec<(f64, ParticipantId)> = candidates
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != index)
        .map(|(_, (id, g))| (me.squared_distance(g).expect("equal dims"), *id))
        .collect();
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(dists[..m].iter().map(|(d, _)| d).sum())
}

/// Affirmative iff the candidate's score beats at least 2/3 of the set:
/// `3 * |{j != i : score_i < score_j}| >= 2 * |G|`, exact in integers.
pub fn vote(index: usize, scores: &[f64]) -> bool {
    let beaten = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != index && scores[index] < s)
        .count();
    3 * beaten >= 2 * scores.len()
}

/// The leader's verification order: ascending by the leader's own Krum
/// score, ties by ascending aggregator id — best candidate first.
pub fn leader_order(
    candidates: &[(ParticipantId, crate::params::ParameterVector)],
    scores: &[f64],
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap()
            .then(candidates[a].0.cmp(&candidates[b].0))
    });
    order
}

/// One verifier in the voting protocol. Scores are computed once per
/// round, on the first commit, and reused for every later candidate.
pub struct Verifier {
    pub id: ParticipantId,
    pub honest: bool,
    f: f64,
    scores: Option<Vec<f64>>,
    prepares_seen: usize,
    score_computations: usize,
}

impl Verifier {
    pub fn new(id: ParticipantId, honest: bool, f: f64) -> Self {
        Self {
            id,
            honest,
            f,
            scores: None,
            prepares_seen: 0,
            score_computations: 0,
        }
    }

    /// Total krum_score invocations this round; the protocol contract is
    /// that this equals |G| regardless of how many candidates the leader
    /// examines.
    pub fn score_computations(&self) -> usize {
        self.score_computations
    }

    fn on_pre_prepare(&mut self) -> Stage {
        self.prepares_seen = 0;
        Stage::Prepare
    }

    fn on_prepare(&mut self, n_verifiers: usize) -> bool {
        self.prepares_seen += 1;
        // Start commit once strictly more than 2/3 |V| prepares arrive.
        3 * self.prepares_seen > 2 * n_verifiers
    }

    fn commit_vote(
        &mut self,
        candidate_index: usize,
        candidates: &[(ParticipantId, crate::params::ParameterVector)],
    ) -> Result<bool, ConsensusError> {
        if self.scores.is_none() {
            let mut scores = Vec::with_capacity(candidates.len());
            for i in 0..candidates.len() {
                scores.push(krum_score(i, candidates, self.f)?);
                self.score_computations += 1;
            }
            self.scores = Some(scores);
        }
        let honest_vote = vote(candidate_index, self.scores.as_ref().unwrap());
        Ok(if self.honest {
            honest_vote
        } else {
            // Contrarian strategy: invert the honest vote.
            !honest_vote
        })
    }
}

/// Outcome of one round of verification.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub approved: Option<CandidateGlobalUpdate>,
    /// Signed commit votes for the approved candidate (empty if none).
    pub votes: Vec<SignedVote>,
    pub supporting_verifier_ids: Vec<ParticipantId>,
    pub candidates_examined: usize,
}

impl RoundOutcome {
    pub fn empty(candidates_examined: usize) -> Self {
        Self {
            approved: None,
            votes: Vec::new(),
            supporting_verifier_ids: Vec::new(),
            candidates_examined,
        }
    }
}

/// Runs the three-stage voting over all candidates in the leader's order.
///
/// Candidates with invalid aggregator signatures are dropped up front.
/// A candidate is approved when affirmative commits exceed 2/3 of the
/// verifier set; it is abandoned when negative commits exceed 1/3. If all
/// candidates are exhausted the outcome is empty. Eq-rule approval is
/// impossible for fewer than three candidates, which then always yields
/// an empty outcome.
pub fn run_round(
    round: u64,
    candidates_in: &[CandidateGlobalUpdate],
    verifiers: &mut [Verifier],
    f: f64,
    scheme: &dyn SignatureScheme,
) -> Result<RoundOutcome, ConsensusError> {
    let candidates: Vec<&CandidateGlobalUpdate> = candidates_in
        .iter()
        .filter(|cand| {
            scheme.verify(
                cand.aggregator_id,
                &candidate_message(round, &cand.as_payload()),
                &cand.signature,
            )
        })
        .collect();
    if candidates.len() < 2 {
        // Krum needs at least two candidates and the vote rule needs three;
        // nothing can be approved.
        return Ok(RoundOutcome::empty(candidates.len()));
    }
    let flat: Vec<(ParticipantId, crate::params::ParameterVector)> = candidates
        .iter()
        .map(|cand| (cand.aggregator_id, cand.update.clone()))
        .collect();

    let n_verifiers = verifiers.len();
    // The leader is the first verifier; it scores the candidates to decide
    // the verification order, then participates as an ordinary voter.
    let leader_scores: Vec<f64> = (0..flat.len())
        .map(|i| krum_score(i, &flat, f))
        .collect::<Result<_, _>>()?;
    let order = leader_order(&flat, &leader_scores);

    let mut examined = 0usize;
    for &cand_idx in &order {
        examined += 1;
        let candidate = candidates[cand_idx];
        let candidate_hash = BlockHash::of(&payload_bytes(&candidate.as_payload()));

        // Pre-prepare from the leader, then an all-to-all prepare exchange
        // delivered in sender-id order.
        for v in verifiers.iter_mut() {
            v.on_pre_prepare();
        }
        let mut ready = vec![false; n_verifiers];
        for _sender in 0..n_verifiers {
            for (slot, v) in verifiers.iter_mut().enumerate() {
                if v.on_prepare(n_verifiers) {
                    ready[slot] = true;
                }
            }
        }
        debug_assert!(ready.iter().all(|&r| r));

        // Commit: every verifier sends its signed vote to the leader.
        let mut commits: Vec<SignedVote> = Vec::with_capacity(n_verifiers);
        for v in verifiers.iter_mut() {
            let bit = v.commit_vote(cand_idx, &flat)?;
            let msg = vote_message(round as i64, candidate.aggregator_id, &candidate_hash, bit);
            commits.push(SignedVote {
                voter_id: v.id,
                candidate_aggregator_id: candidate.aggregator_id,
                vote: bit,
                signature: scheme.sign(v.id, &msg)?,
            });
        }
        let affirmative = commits.iter().filter(|c| c.vote).count();
        if 3 * affirmative > 2 * n_verifiers {
            let supporting = commits
                .iter()
                .filter(|c| c.vote)
                .map(|c| c.voter_id)
                .collect();
            return Ok(RoundOutcome {
                approved: Some(candidate.clone()),
                votes: commits,
                supporting_verifier_ids: supporting,
                candidates_examined: examined,
            });
        }
        // All commits are in without approval; in the lockstep schedule the
        // leader moves to the next candidate (negatives exceeded 1/3 |V|, or
        // the count sat exactly on the boundary and nothing more can arrive).
    }
    Ok(RoundOutcome::empty(examined))
}

/// A malicious leader can only suppress an approved outcome; it can never
/// fabricate a non-empty block, because chain validation demands more than
/// 2/3 |V| verifiable affirmative signatures it cannot forge.
pub fn malicious_leader_behavior(outcome: RoundOutcome) -> RoundOutcome {
    RoundOutcome::empty(outcome.candidates_examined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::KeyedHashScheme;
    use crate::params::ParameterVector;

    fn pv(vals: &[f64]) -> ParameterVector {
        ParameterVector::new(vals.to_vec()).unwrap()
    }

    fn flat(cands: &[(u64, &[f64])]) -> Vec<(ParticipantId, ParameterVector)> {
        cands.iter().map(|&(id, v)| (id, pv(v))).collect()
    }

    #[test]
    fn identical_candidates_score_zero() {
        let cands = flat(&[(0, &[1.0, 2.0]), (1, &[1.0, 2.0]), (2, &[1.0, 2.0])]);
        for i in 0..3 {
            assert_eq!(krum_score(i, &cands, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn worked_example_scores() {
        // f = 0, |G| = 4 -> m = clamp(4 - 2, 1, 3) = 2.
        let cands = flat(&[
            (0, &[0.0, 0.0]),
            (1, &[1.0, 0.0]),
            (2, &[0.0, 1.0]),
            (3, &[5.0, 5.0]),
        ]);
        assert_eq!(krum_score(0, &cands, 0.0).unwrap(), 2.0);
        assert_eq!(krum_score(3, &cands, 0.0).unwrap(), 41.0 + 41.0);
    }

    #[test]
    fn scaling_preserves_argmin() {
        let cands = flat(&[
            (0, &[0.1, 0.2]),
            (1, &[1.0, -0.5]),
            (2, &[0.2, 0.1]),
            (3, &[3.0, 3.0]),
        ]);
        let scaled: Vec<(ParticipantId, ParameterVector)> = cands
            .iter()
            .map(|(id, g)| (*id, g.scale(2.0)))
            .collect();
        for i in 0..4 {
            let a = krum_score(i, &cands, 0.2).unwrap();
            let b = krum_score(i, &scaled, 0.2).unwrap();
            assert!((b - 4.0 * a).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn too_few_candidates() {
        let cands = flat(&[(0, &[1.0])]);
        assert!(matches!(
            krum_score(0, &cands, 0.0),
            Err(ConsensusError::TooFewCandidates(1))
        ));
    }

    #[test]
    fn vote_rule_direct() {
        // |G| = 3, scores (1, 2, 3): candidate 0 beats 2 >= 2 -> vote 1.
        let scores = [1.0, 2.0, 3.0];
        assert!(vote(0, &scores));
        assert!(!vote(1, &scores));
        assert!(!vote(2, &scores));
        // All equal: strict inequality never holds.
        assert!(!vote(0, &[2.0, 2.0, 2.0]));
        // |G| = 2: max beaten count 1 < 4/3 -> never approved.
        assert!(!vote(0, &[1.0, 5.0]));
    }

    #[test]
    fn leader_order_sorts_by_score_then_id() {
        let cands = flat(&[(10, &[0.0]), (11, &[0.0]), (12, &[0.0])]);
        let order = leader_order(&cands, &[5.0, 1.0, 3.0]);
        assert_eq!(order, vec![1, 2, 0]);
        let tied = leader_order(&cands, &[2.0, 2.0, 2.0]);
        assert_eq!(tied, vec![0, 1, 2]);
        let single = leader_order(&cands[..1], &[9.0]);
        assert_eq!(single, vec![0]);
    }

    fn candidate(
        round: u64,
        id: u64,
        vals: &[f64],
        scheme: &KeyedHashScheme,
    ) -> CandidateGlobalUpdate {
        let update = pv(vals);
        let payload = crate::chain::ApprovedUpdate {
            global_update: update.clone(),
            aggregator_id: id,
            provider_ids: vec![100 + id],
        };
        CandidateGlobalUpdate {
            aggregator_id: id,
            update,
            provider_ids: vec![100 + id],
            signature: scheme.sign(id, &candidate_message(round, &payload)).unwrap(),
        }
    }

    fn verifier_set(ids: &[u64], dishonest: &[u64], f: f64) -> Vec<Verifier> {
        ids.iter()
            .map(|&id| Verifier::new(id, !dishonest.contains(&id), f))
            .collect()
    }

    #[test]
    fn all_honest_approves_best_candidate_first() {
        let scheme = KeyedHashScheme::new(1, 0..220);
        // Three near-identical candidates and one far outlier.
        let cands: Vec<CandidateGlobalUpdate> = vec![
            candidate(0, 1, &[1.0, 1.0], &scheme),
            candidate(0, 2, &[1.01, 1.0], &scheme),
            candidate(0, 3, &[1.0, 1.02], &scheme),
            candidate(0, 4, &[9.0, 9.0], &scheme),
        ];
        let mut verifiers = verifier_set(&[200, 201, 202, 203, 204, 205, 206], &[], 0.0);
        let outcome = run_round(0, &cands, &mut verifiers, 0.0, &scheme).unwrap();
        let approved = outcome.approved.expect("approved");
        assert_ne!(approved.aggregator_id, 4);
        assert_eq!(outcome.candidates_examined, 1);
        assert_eq!(outcome.supporting_verifier_ids.len(), 7);
        // Scores computed exactly once per verifier: |G| calls each.
        for v in &verifiers {
            assert_eq!(v.score_computations(), 4);
        }
    }

    #[test]
    fn malicious_verifier_votes_are_complements() {
        let scheme = KeyedHashScheme::new(2, 0..220);
        let cands: Vec<CandidateGlobalUpdate> = vec![
            candidate(0, 1, &[1.0, 1.0], &scheme),
            candidate(0, 2, &[1.1, 1.0], &scheme),
            candidate(0, 3, &[5.0, 4.0], &scheme),
        ];
        let mut honest = verifier_set(&[200], &[], 0.0);
        let mut contrarian = verifier_set(&[200], &[200], 0.0);
        let flat: Vec<(ParticipantId, ParameterVector)> = cands
            .iter()
            .map(|c| (c.aggregator_id, c.update.clone()))
            .collect();
        for i in 0..3 {
            let a = honest[0].commit_vote(i, &flat).unwrap();
            let b = contrarian[0].commit_vote(i, &flat).unwrap();
            assert_eq!(a, !b);
        }
    }

    #[test]
    fn rejection_moves_to_next_candidate_and_exhaustion_is_empty() {
        let scheme = KeyedHashScheme::new(3, 0..220);
        let cands: Vec<CandidateGlobalUpdate> = vec![
            candidate(0, 1, &[1.0, 1.0], &scheme),
            candidate(0, 2, &[1.1, 1.0], &scheme),
            candidate(0, 3, &[5.0, 4.0], &scheme),
        ];
        // 3 contrarians of 7: best candidate gets 4 affirmative (not > 14/3
        // ... 4 > 4.67 fails), and every candidate collects > 1/3 negatives,
        // so the round exhausts all three candidates.
        let mut verifiers =
            verifier_set(&[200, 201, 202, 203, 204, 205, 206], &[204, 205, 206], 0.0);
        let outcome = run_round(0, &cands, &mut verifiers, 0.0, &scheme).unwrap();
        assert!(outcome.approved.is_none());
        assert_eq!(outcome.candidates_examined, 3);
        // Scores were still computed only once per verifier.
        for v in &verifiers {
            assert_eq!(v.score_computations(), 3);
        }
    }

    #[test]
    fn no_candidates_yields_empty() {
        let scheme = KeyedHashScheme::new(4, 0..220);
        let mut verifiers = verifier_set(&[200, 201, 202], &[], 0.0);
        let outcome = run_round(0, &[], &mut verifiers, 0.0, &scheme).unwrap();
        assert!(outcome.approved.is_none());
        assert_eq!(outcome.candidates_examined, 0);
    }

    #[test]
    fn unsigned_candidates_are_dropped() {
        let scheme = KeyedHashScheme::new(5, 0..220);
        let mut cands = vec![
            candidate(0, 1, &[1.0, 1.0], &scheme),
            candidate(0, 2, &[1.1, 1.0], &scheme),
            candidate(0, 3, &[1.05, 1.0], &scheme),
        ];
        cands[0].signature = crate::chain::Signature([9u8; 32]);
        let mut verifiers = verifier_set(&[200, 201, 202, 203, 204, 205, 206], &[], 0.0);
        let outcome = run_round(0, &cands, &mut verifiers, 0.0, &scheme).unwrap();
        // Two valid candidates remain; Eq-rule approval is impossible.
        assert!(outcome.approved.is_none());
    }

    #[test]
    fn malicious_leader_only_suppresses() {
        let scheme = KeyedHashScheme::new(6, 0..220);
        let cands: Vec<CandidateGlobalUpdate> = vec![
            candidate(0, 1, &[1.0, 1.0], &scheme),
            candidate(0, 2, &[1.01, 1.0], &scheme),
            candidate(0, 3, &[1.0, 1.01], &scheme),
            candidate(0, 4, &[7.0, 7.0], &scheme),
        ];
        let mut verifiers = verifier_set(&[200, 201, 202, 203, 204, 205, 206], &[], 0.0);
        let outcome = run_round(0, &cands, &mut verifiers, 0.0, &scheme).unwrap();
        assert!(outcome.approved.is_some());
        let suppressed = malicious_leader_behavior(outcome);
        assert!(suppressed.approved.is_none());
        assert!(suppressed.votes.is_empty());
    }
}
