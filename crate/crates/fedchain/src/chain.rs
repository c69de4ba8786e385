//! Blockchain data model: canonical block serialization, SHA-256 content
//! hashing, signatures, chain validation and the stake ledger.
//!
//! Canonical layout rules (consensus-critical, do not change casually):
//! fields in declaration order, integers as 8-byte big-endian, reals as
//! IEEE-754 binary64 big-endian bit patterns, arrays length-prefixed with
//! a big-endian u64, options as a one-byte presence flag.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::ParameterVector;

pub type ParticipantId = u64;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("unknown participant {0}")]
    UnknownParticipant(ParticipantId),
    #[error("block round {got} does not follow tip round {tip}")]
    BadRound { got: i64, tip: i64 },
    #[error("prev_hash does not match the chain tip")]
    BadLinkage,
    #[error("creator signature invalid")]
    BadCreatorSignature,
    #[error("vote signature from participant {0} invalid")]
    BadVoteSignature(ParticipantId),
    #[error("vote from {0} targets a different candidate")]
    VoteCandidateMismatch(ParticipantId),
    #[error("duplicate vote from participant {0}")]
    DuplicateVote(ParticipantId),
    #[error("insufficient affirmative votes: {got} of {verifiers} verifiers (need > 2/3)")]
    InsufficientVotes { got: usize, verifiers: usize },
    #[error("empty payload inconsistent with stake increments or votes")]
    InconsistentEmptyBlock,
    #[error("malformed chain data: {0}")]
    Malformed(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// SHA-256 digest of a canonical serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockHash(pub [u8; 32]);

impl BlockHash {
    pub const ZERO: BlockHash = BlockHash([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(bytes);
        BlockHash(h.finalize().into())
    }

    /// The digest reinterpreted as a big-endian integer, reduced mod `m`.
    pub fn mod_u64(&self, m: u64) -> u64 {
        assert!(m > 0);
        let mut acc: u128 = 0;
        for &b in &self.0 {
            acc = ((acc << 8) | b as u128) % m as u128;
        }
        acc as u64
    }

    /// h <- SHA-256(h), the re-hash step used for repeated draws.
    pub fn rehash(&self) -> Self {
        Self::of(&self.0)
    }
}

impl fmt::Display for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl Serialize for BlockHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for BlockHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))?;
        Ok(BlockHash(arr))
    }
}

/// A detached signature. The default scheme is a keyed-hash simulation
/// signer; the trait admits real asymmetric schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 32]);

impl Serialize for Signature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))?;
        Ok(Signature(arr))
    }
}

/// Signing interface over registered participant identities.
pub trait SignatureScheme {
    fn sign(&self, id: ParticipantId, msg: &[u8]) -> Result<Signature, ChainError>;
    fn verify(&self, id: ParticipantId, msg: &[u8], sig: &Signature) -> bool;
}

/// Keyed-hash simulation signer: every registered identity holds a secret
/// key derived from the registry seed; a signature is the keyed digest of
/// the message.
#[derive(Debug, Clone)]
pub struct KeyedHashScheme {
    keys: BTreeMap<ParticipantId, [u8; 32]>,
}

impl KeyedHashScheme {
    pub fn new(seed: u64, participants: impl IntoIterator<Item = ParticipantId>) -> Self {
        let keys = participants
            .into_iter()
            .map(|id| {
                let mut h = Sha256::new();
                h.update(b"fedchain-identity-key");
                h.update(seed.to_be_bytes());
                h.update(id.to_be_bytes());
                (id, h.finalize().into())
            })
            .collect();
        Self { keys }
    }
}

impl SignatureScheme for KeyedHashScheme {
    fn sign(&self, id: ParticipantId, msg: &[u8]) -> Result<Signature, ChainError> {
        let key = self.keys.get(&id).ok_or(ChainError::UnknownParticipant(id))?;
        let mut h = Sha256::new();
        h.update(b"fedchain-sig");
        h.update(key);
        h.update(msg);
        Ok(Signature(h.finalize().into()))
    }

    fn verify(&self, id: ParticipantId, msg: &[u8], sig: &Signature) -> bool {
        match self.sign(id, msg) {
            Ok(expected) => expected == *sig,
            Err(_) => false,
        }
    }
}

/// The global update approved this round together with its contributors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovedUpdate {
    pub global_update: ParameterVector,
    pub aggregator_id: ParticipantId,
    pub provider_ids: Vec<ParticipantId>,
}

/// A verifier's signed commit vote on the approved candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedVote {
    pub voter_id: ParticipantId,
    pub candidate_aggregator_id: ParticipantId,
    pub vote: bool,
    pub signature: Signature,
}

/// One chained record: at most one approved global update per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub round: i64,
    pub prev_hash: BlockHash,
    pub payload: Option<ApprovedUpdate>,
    pub votes: Vec<SignedVote>,
    pub stake_increments: Vec<(ParticipantId, u64)>,
    pub creator_id: ParticipantId,
    pub creator_signature: Signature,
}

// ---------------------------------------------------------------------------
// Canonical serialization
// ---------------------------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_be_bytes());
    }
    fn bytes32(&mut self, v: &[u8; 32]) {
        self.buf.extend_from_slice(v);
    }
    fn bool(&mut self, v: bool) {
        self.buf.push(u8::from(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], ChainError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ChainError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u64(&mut self) -> Result<u64, ChainError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, ChainError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ChainError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn bytes32(&mut self) -> Result<[u8; 32], ChainError> {
        Ok(self.take(32)?.try_into().unwrap())
    }
    fn bool(&mut self) -> Result<bool, ChainError> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(ChainError::Malformed(format!("bad bool byte {b}"))),
        }
    }
    fn len(&mut self) -> Result<usize, ChainError> {
        let n = self.u64()?;
        // Guard against absurd prefixes in corrupted files.
        if n as usize > self.buf.len() {
            return Err(ChainError::Malformed(format!("length prefix {n} too large")));
        }
        Ok(n as usize)
    }
    fn done(&self) -> Result<(), ChainError> {
        if self.pos != self.buf.len() {
            return Err(ChainError::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_params(w: &mut Writer, p: &ParameterVector) {
    w.u64(p.len() as u64);
    for &v in p.as_slice() {
        w.f64(v);
    }
}

fn read_params(r: &mut Reader) -> Result<ParameterVector, ChainError> {
    let n = r.len()?;
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        vals.push(r.f64()?);
    }
    ParameterVector::new(vals).map_err(|e| ChainError::Malformed(e.to_string()))
}

fn write_payload(w: &mut Writer, payload: &Option<ApprovedUpdate>) {
    match payload {
        None => w.bool(false),
        Some(p) => {
            w.bool(true);
            write_params(w, &p.global_update);
            w.u64(p.aggregator_id);
            w.u64(p.provider_ids.len() as u64);
            for &id in &p.provider_ids {
                w.u64(id);
            }
        }
    }
}

/// Canonical bytes of the approved-update payload; hashed into the vote
/// message so commits bind to the update content.
pub fn payload_bytes(payload: &ApprovedUpdate) -> Vec<u8> {
    let mut w = Writer::new();
    write_payload(&mut w, &Some(payload.clone()));
    w.buf
}

/// Message a verifier signs when committing a vote on a candidate.
pub fn vote_message(
    round: i64,
    candidate_aggregator_id: ParticipantId,
    candidate_hash: &BlockHash,
    vote: bool,
) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(b"fedchain-vote");
    w.i64(round);
    w.u64(candidate_aggregator_id);
    w.bytes32(&candidate_hash.0);
    w.bool(vote);
    w.buf
}

fn serialize_inner(block: &Block, include_signature: bool) -> Vec<u8> {
    let mut w = Writer::new();
    w.i64(block.round);
    w.bytes32(&block.prev_hash.0);
    write_payload(&mut w, &block.payload);
    w.u64(block.votes.len() as u64);
    for v in &block.votes {
        w.u64(v.voter_id);
        w.u64(v.candidate_aggregator_id);
        w.bool(v.vote);
        w.bytes32(&v.signature.0);
    }
    w.u64(block.stake_increments.len() as u64);
    for &(id, amount) in &block.stake_increments {
        w.u64(id);
        w.u64(amount);
    }
    w.u64(block.creator_id);
    if include_signature {
        w.bytes32(&block.creator_signature.0);
    }
    w.buf
}

/// Full canonical serialization, signature included.
pub fn canonical_serialize(block: &Block) -> Vec<u8> {
    serialize_inner(block, true)
}

/// The bytes a creator signs: everything except the signature itself.
pub fn presign_bytes(block: &Block) -> Vec<u8> {
    serialize_inner(block, false)
}

/// Inverse of [`canonical_serialize`].
pub fn canonical_deserialize(bytes: &[u8]) -> Result<Block, ChainError> {
    let mut r = Reader::new(bytes);
    let round = r.i64()?;
    let prev_hash = BlockHash(r.bytes32()?);
    let payload = if r.bool()? {
        let global_update = read_params(&mut r)?;
        let aggregator_id = r.u64()?;
        let n = r.len()?;
        let mut provider_ids = Vec::with_capacity(n);
        for _ in 0..n {
            provider_ids.push(r.u64()?);
        }
        Some(ApprovedUpdate {
            global_update,
            aggregator_id,
            provider_ids,
        })
    } else {
        None
    };
    let n_votes = r.len()?;
    let mut votes = Vec::with_capacity(n_votes);
    for _ in 0..n_votes {
        votes.push(SignedVote {
            voter_id: r.u64()?,
            candidate_aggregator_id: r.u64()?,
            vote: r.bool()?,
            signature: Signature(r.bytes32()?),
        });
    }
    let n_inc = r.len()?;
    let mut stake_increments = Vec::with_capacity(n_inc);
    for _ in 0..n_inc {
        stake_increments.push((r.u64()?, r.u64()?));
    }
    let creator_id = r.u64()?;
    let creator_signature = Signature(r.bytes32()?);
    r.done()?;
    Ok(Block {
        round,
        prev_hash,
        payload,
        votes,
        stake_increments,
        creator_id,
        creator_signature,
    })
}

/// SHA-256 over the canonical serialization.
pub fn hash_block(block: &Block) -> BlockHash {
    BlockHash::of(&canonical_serialize(block))
}

// ---------------------------------------------------------------------------
// Stake ledger
// ---------------------------------------------------------------------------

/// Participant id -> nonnegative integer stake. The protocol only awards
/// stake, so balances never decrease.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StakeLedger {
    stakes: BTreeMap<ParticipantId, u64>,
}

impl StakeLedger {
    pub fn uniform(n: usize, initial: u64) -> Self {
        Self {
            stakes: (0..n as u64).map(|id| (id, initial)).collect(),
        }
    }

    pub fn from_stakes(stakes: BTreeMap<ParticipantId, u64>) -> Self {
        Self { stakes }
    }

    pub fn stake(&self, id: ParticipantId) -> u64 {
        self.stakes.get(&id).copied().unwrap_or(0)
    }

    pub fn contains(&self, id: ParticipantId) -> bool {
        self.stakes.contains_key(&id)
    }

    pub fn total(&self) -> u64 {
        self.stakes.values().sum()
    }

    pub fn participants(&self) -> impl Iterator<Item = ParticipantId> + '_ {
        self.stakes.keys().copied()
    }

    pub fn credit(&mut self, id: ParticipantId, amount: u64) -> Result<(), ChainError> {
        let entry = self
            .stakes
            .get_mut(&id)
            .ok_or(ChainError::UnknownParticipant(id))?;
        *entry += amount;
        Ok(())
    }
}

/// Applies a block's stake increments to the ledger.
pub fn apply_stake_increments(ledger: &mut StakeLedger, block: &Block) -> Result<(), ChainError> {
    for &(id, amount) in &block.stake_increments {
        ledger.credit(id, amount)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Chain
// ---------------------------------------------------------------------------

/// Append-only block chain starting from a fixed genesis block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    blocks: Vec<Block>,
}

impl Chain {
    /// Genesis convention: round -1, zero prev_hash seeded from `genesis_tag`,
    /// empty payload, unsigned.
    pub fn new(genesis_tag: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"fedchain-genesis");
        h.update(genesis_tag.to_be_bytes());
        let genesis = Block {
            round: -1,
            prev_hash: BlockHash(h.finalize().into()),
            payload: None,
            votes: Vec::new(),
            stake_increments: Vec::new(),
            creator_id: 0,
            creator_signature: Signature([0u8; 32]),
        };
        Self {
            blocks: vec![genesis],
        }
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain always has genesis")
    }

    pub fn tip_hash(&self) -> BlockHash {
        hash_block(self.tip())
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Validates a block against the tip and appends it, applying stake
    /// increments on success. Validation is a pure function of the block,
    /// its predecessor and the ledger, so every honest validator agrees.
    pub fn validate_and_append(
        &mut self,
        block: Block,
        ledger: &mut StakeLedger,
        n_verifiers: usize,
        scheme: &dyn SignatureScheme,
    ) -> Result<(), ChainError> {
        let tip = self.tip();
        if block.round != tip.round + 1 {
            return Err(ChainError::BadRound {
                got: block.round,
                tip: tip.round,
            });
        }
        if block.prev_hash != self.tip_hash() {
            return Err(ChainError::BadLinkage);
        }
        if !scheme.verify(block.creator_id, &presign_bytes(&block), &block.creator_signature) {
            return Err(ChainError::BadCreatorSignature);
        }
        match &block.payload {
            None => {
                if !block.stake_increments.is_empty() || !block.votes.is_empty() {
                    return Err(ChainError::InconsistentEmptyBlock);
                }
            }
            Some(payload) => {
                let candidate_hash = BlockHash::of(&payload_bytes(payload));
                let mut seen = BTreeSet::new();
                let mut affirmative = 0usize;
                for vote in &block.votes {
                    if vote.candidate_aggregator_id != payload.aggregator_id {
                        return Err(ChainError::VoteCandidateMismatch(vote.voter_id));
                    }
                    if !seen.insert(vote.voter_id) {
                        return Err(ChainError::DuplicateVote(vote.voter_id));
                    }
                    let msg = vote_message(
                        block.round,
                        vote.candidate_aggregator_id,
                        &candidate_hash,
                        vote.vote,
                    );
                    if !scheme.verify(vote.voter_id, &msg, &vote.signature) {
                        return Err(ChainError::BadVoteSignature(vote.voter_id));
                    }
                    if vote.vote {
                        affirmative += 1;
                    }
                }
                // Strictly more than 2/3 of the verifier set, as an exact
                // rational comparison: 3 * affirmative > 2 * |V|.
                if 3 * affirmative <= 2 * n_verifiers {
                    return Err(ChainError::InsufficientVotes {
                        got: affirmative,
                        verifiers: n_verifiers,
                    });
                }
                for &(id, _) in &block.stake_increments {
                    if !ledger.contains(id) {
                        return Err(ChainError::UnknownParticipant(id));
                    }
                }
            }
        }
        apply_stake_increments(ledger, &block)?;
        self.blocks.push(block);
        Ok(())
    }

    /// Length-prefixed binary log of canonical blocks.
    pub fn export_binary(&self, path: &Path) -> Result<(), ChainError> {
        let mut out = Vec::new();
        out.extend_from_slice(b"FCHN");
        out.extend_from_slice(&1u32.to_be_bytes());
        out.extend_from_slice(&(self.blocks.len() as u64).to_be_bytes());
        for block in &self.blocks {
            let bytes = canonical_serialize(block);
            out.extend_from_slice(&(bytes.len() as u64).to_be_bytes());
            out.extend_from_slice(&bytes);
        }
        std::fs::write(path, out).map_err(|source| ChainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn import_binary(path: &Path) -> Result<Self, ChainError> {
        let data = std::fs::read(path).map_err(|source| ChainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if data.len() < 16 || &data[0..4] != b"FCHN" {
            return Err(ChainError::Malformed("bad chain file magic".into()));
        }
        let version = u32::from_be_bytes(data[4..8].try_into().unwrap());
        if version != 1 {
            return Err(ChainError::Malformed(format!("unsupported version {version}")));
        }
        let count = u64::from_be_bytes(data[8..16].try_into().unwrap()) as usize;
        let mut blocks = Vec::with_capacity(count);
        let mut pos = 16usize;
        for _ in 0..count {
            let len_bytes = data
                .get(pos..pos + 8)
                .ok_or_else(|| ChainError::Malformed("truncated block length".into()))?;
            let len = u64::from_be_bytes(len_bytes.try_into().unwrap()) as usize;
            pos += 8;
            let body = data
                .get(pos..pos + len)
                .ok_or_else(|| ChainError::Malformed("truncated block body".into()))?;
            blocks.push(canonical_deserialize(body)?);
            pos += len;
        }
        if pos != data.len() {
            return Err(ChainError::Malformed("trailing bytes in chain file".into()));
        }
        if blocks.is_empty() {
            return Err(ChainError::Malformed("chain file has no genesis".into()));
        }
        Ok(Self { blocks })
    }

    /// Human-readable JSON dump for debugging.
    pub fn export_json(&self, path: &Path) -> Result<(), ChainError> {
        let text = serde_json::to_string_pretty(&self.blocks)
            .map_err(|e| ChainError::Malformed(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| ChainError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
