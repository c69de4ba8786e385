//! Randomized structural invariants.

use proptest::collection::vec;
use proptest::prelude::*;

use fedchain::chain::{
    canonical_deserialize, canonical_serialize, ApprovedUpdate, Block, BlockHash, Signature,
    SignedVote, StakeLedger,
};
use fedchain::compression::{densify, top_k_sparsify};
use fedchain::params::ParameterVector;
use fedchain::roles::{build_ring, select_roles};

fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    vec(-1e6f64..1e6, len)
}

proptest! {
    #[test]
    fn sparsify_conserves_and_orders_magnitudes(
        vals in finite_vec(1..128),
        s in 0.0f64..0.99,
    ) {
        let d = ParameterVector::new(vals).unwrap();
        let k = ((1.0 - s) * d.len() as f64 + 0.5).floor() as usize;
        prop_assume!(k >= 1);
        match top_k_sparsify(&d, s) {
            Ok((sparse, residual)) => {
                sparse.validate().unwrap();
                let back = densify(&sparse).add(&residual).unwrap();
                prop_assert_eq!(&back, &d);
                let min_kept = sparse
                    .values
                    .iter()
                    .map(|v| v.abs())
                    .fold(f64::INFINITY, f64::min);
                let max_dropped = residual
                    .as_slice()
                    .iter()
                    .map(|v| v.abs())
                    .fold(0.0, f64::max);
                prop_assert!(min_kept >= max_dropped);
            }
            // Only an all-zero input refuses to sparsify.
            Err(_) => prop_assert!(d.as_slice().iter().all(|&v| v == 0.0)),
        }
    }

    #[test]
    fn block_serialization_round_trips(
        round in -1i64..1_000_000,
        prev in any::<[u8; 32]>(),
        update in finite_vec(1..40),
        providers in vec(0u64..1000, 0..6),
        votes in vec((0u64..1000, any::<bool>(), any::<[u8; 32]>()), 0..8),
        increments in vec((0u64..1000, 1u64..100), 0..8),
        creator in 0u64..1000,
        sig in any::<[u8; 32]>(),
        with_payload in any::<bool>(),
    ) {
        let payload = with_payload.then(|| ApprovedUpdate {
            global_update: ParameterVector::new(update).unwrap(),
            aggregator_id: creator,
            provider_ids: providers,
        });
        let block = Block {
            round,
            prev_hash: BlockHash(prev),
            payload,
            votes: votes
                .into_iter()
                .map(|(voter_id, vote, s)| SignedVote {
                    voter_id,
                    candidate_aggregator_id: creator,
                    vote,
                    signature: Signature(s),
                })
                .collect(),
            stake_increments: increments,
            creator_id: creator,
            creator_signature: Signature(sig),
        };
        let bytes = canonical_serialize(&block);
        let decoded = canonical_deserialize(&bytes).unwrap();
        prop_assert_eq!(&decoded, &block);
        // Re-serialization is stable byte for byte.
        prop_assert_eq!(canonical_serialize(&decoded), bytes);
    }

    #[test]
    fn role_selection_partitions_participants(
        stakes in vec(0u64..50, 8..24),
        tip in any::<[u8; 32]>(),
    ) {
        let n = stakes.len();
        let ledger = StakeLedger::from_stakes(
            stakes.iter().enumerate().map(|(i, &s)| (i as u64, s)).collect(),
        );
        let staked = stakes.iter().filter(|&&s| s > 0).count();
        prop_assume!(staked > 3);
        let ring = build_ring(&ledger).unwrap();
        let roles = select_roles(&BlockHash(tip), &ring, 2, 1).unwrap();
        let mut all: Vec<u64> = roles
            .aggregators
            .iter()
            .chain(&roles.verifiers)
            .chain(&roles.providers)
            .copied()
            .collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n as u64).collect::<Vec<_>>());
        for &id in roles.aggregators.iter().chain(&roles.verifiers) {
            prop_assert!(stakes[id as usize] > 0);
        }
    }

    #[test]
    fn parameter_arithmetic_is_consistent(
        a in finite_vec(1..64),
    ) {
        let b: Vec<f64> = a.iter().map(|v| v * 0.5 - 1.0).collect();
        let pa = ParameterVector::new(a).unwrap();
        let pb = ParameterVector::new(b).unwrap();
        let diff = pa.sub(&pb).unwrap();
        let back = pb.add(&diff).unwrap();
        for i in 0..pa.len() {
            prop_assert!((back[i] - pa[i]).abs() <= 1e-9 * pa[i].abs().max(1.0));
        }
        prop_assert_eq!(pa.squared_distance(&pb).unwrap(), diff.as_slice().iter().map(|v| v * v).sum::<f64>());
    }
}
