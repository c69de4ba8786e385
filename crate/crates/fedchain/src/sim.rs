//! Round-loop orchestrator: role selection, local training, aggregation,
//! verification and consensus, one block per round, plus the metrics
//! harness, the centralized FedAvg baseline, exports and an independent
//! chain replayer.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{assign_malicious, malicious_aggregate, poison_dataset, AdversaryConfig};
use crate::aggregation::{
    run_aggregator, update_message, AggregatorConfig, CandidateGlobalUpdate, LocalUpdateMsg,
};
use crate::chain::{
    presign_bytes, Block, Chain, ChainError, KeyedHashScheme, ParticipantId, Signature,
    SignatureScheme, StakeLedger,
};
use crate::compression::{
    dense_to_sparse, periodic_schedule, sparsity_for_round, top_k_sparsify, CompressionError,
};
use crate::consensus::{malicious_leader_behavior, run_round, ConsensusError, Verifier};
use crate::learner::{
    evaluate, init_model, local_train, make_synthetic_dataset, partition, Dataset, LearnerConfig,
    LearnerError,
};
use crate::params::ParameterVector;
use crate::roles::{build_ring, select_roles, RoleError};
use crate::seeds::{child_seed, rng_for};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Param(#[from] crate::params::ParamError),
    #[error(transparent)]
    Roles(#[from] RoleError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("replay mismatch: {0}")]
    Replay(String),
}

/// Where the source corpus comes from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DatasetSource {
    Synthetic {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
    },
    Idx {
        images: String,
        labels: String,
    },
    Csv {
        path: String,
    },
}

/// Full simulation configuration. All stochastic behavior derives from
/// `seed` through the documented child-seed rule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimConfig {
    pub n_participants: usize,
    pub n_aggregators: usize,
    pub n_verifiers: usize,
    /// Number of local updates a global update must contain.
    pub c: usize,
    pub rounds: u64,
    pub learner: LearnerConfig,
    pub sparsity_levels: Vec<f64>,
    pub sparsity_period: u64,
    pub compression_enabled: bool,
    pub initial_stake: u64,
    pub stake_increment: u64,
    /// Fraction of each participant's training data used to score updates.
    pub eval_fraction: f64,
    /// Krum robustness parameter: assumed upper bound on malicious fraction.
    pub krum_f: f64,
    pub adversary: AdversaryConfig,
    pub seed: u64,
    pub dataset: DatasetSource,
    /// Fraction of the source corpus reserved as the held-out test set.
    pub test_fraction: f64,
    /// Evaluate the global model every k rounds.
    pub eval_every: u64,
    /// Keep residuals across rounds in which a participant is not a provider.
    pub persist_residuals: bool,
    /// Resample each scorer's evaluation subset every round instead of
    /// fixing it per participant.
    pub resample_eval_subset: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let err = |msg: String| Err(SimError::InvalidConfig(msg));
        // Approval feasibility: with a single scored neighbor the two
        // mutually nearest candidates tie exactly at the minimum, so the
        // best achievable beat count is |G| - 2; otherwise a generic strict
        // winner beats |G| - 1. Either way the vote rule must be reachable
        // with a full candidate set, or every block would be empty.
        let g = self.n_aggregators;
        let m = crate::consensus::krum_neighbor_count(g, self.krum_f);
        let best_beaten = if m == 1 { g.saturating_sub(2) } else { g - 1 };
        if g < 2 || 3 * best_beaten < 2 * g {
            return err(format!(
                "{} aggregators with krum_f = {} cannot approve any candidate",
                g, self.krum_f
            ));
        }
        if self.n_aggregators + self.n_verifiers >= self.n_participants {
            return err(format!(
                "{} aggregators + {} verifiers must be < {} participants",
                self.n_aggregators, self.n_verifiers, self.n_participants
            ));
        }
        if self.n_verifiers < 1 || self.rounds < 1 || self.c < 1 {
            return err("n_verifiers, rounds and c must be >= 1".into());
        }
        if self.n_participants - self.n_aggregators - self.n_verifiers < 3 * self.c {
            return err(format!(
                "only {} providers for 3c = {} sampled updates",
                self.n_participants - self.n_aggregators - self.n_verifiers,
                3 * self.c
            ));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return err(format!("eval_fraction = {}", self.eval_fraction));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return err(format!("test_fraction = {}", self.test_fraction));
        }
        if !(0.0..1.0).contains(&self.krum_f) {
            return err(format!("krum_f = {}", self.krum_f));
        }
        if !(0.0..1.0).contains(&self.adversary.malicious_fraction) {
            return err(format!(
                "malicious_fraction = {}",
                self.adversary.malicious_fraction
            ));
        }
        if self.sparsity_levels.is_empty() || self.sparsity_period == 0 {
            return err("sparsity schedule must be nonempty with period >= 1".into());
        }
        if self.eval_every == 0 {
            return err("eval_every must be >= 1".into());
        }
        if self.initial_stake == 0 {
            return err("initial_stake must be positive".into());
        }
        self.learner.validate().map_err(SimError::Learner)?;
        Ok(())
    }

    pub fn schedule(&self) -> Vec<(u64, f64)> {
        periodic_schedule(&self.sparsity_levels, self.sparsity_period)
    }

    /// Loads TOML or JSON by file extension.
    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let is_json = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false);
        let cfg: SimConfig = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| SimError::InvalidConfig(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| SimError::InvalidConfig(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Wall-clock breakdown of one round, in seconds. Process timers follow
/// the round structure: role selection, local training, aggregation,
/// verification/consensus; evaluation is reported separately.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ProcessTimings {
    pub role_selection_s: f64,
    pub local_training_s: f64,
    pub aggregation_s: f64,
    pub consensus_s: f64,
    pub evaluation_s: f64,
    /// Wall time of the four protocol processes measured end to end.
    pub round_total_s: f64,
}

/// Per-round observables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    /// Test-set accuracy of the global model; absent on skipped rounds.
    pub accuracy: Option<f64>,
    pub empty_block: bool,
    /// The approved update contains at least one malicious provider.
    pub poisoned_block: bool,
    pub malicious_stake_share: f64,
    pub timings: ProcessTimings,
}

/// Aggregates over a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    /// Number of evaluated rounds in the trailing window.
    pub window_rounds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Poisoned blocks / non-empty blocks over the window.
    pub attack_ratio: f64,
    /// True when the window held no non-empty block at all.
    pub attack_ratio_degenerate: bool,
    /// Percentage of empty blocks over all rounds.
    pub empty_block_pct: f64,
    pub final_malicious_stake_share: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsLog {
    pub config: SimConfig,
    pub rounds: Vec<RoundMetrics>,
    pub summary: Summary,
}

/// Everything a run produces beyond the serializable log.
pub struct SimOutput {
    pub log: MetricsLog,
    pub chain: Chain,
    pub ledger: StakeLedger,
    pub initial_model: ParameterVector,
    pub final_models: BTreeMap<ParticipantId, ParameterVector>,
    pub test_set: Dataset,
}

fn load_source(cfg: &SimConfig) -> Result<Dataset, SimError> {
    match &cfg.dataset {
        DatasetSource::Synthetic {
            classes,
            per_class,
            dim,
            spread,
        } => Ok(make_synthetic_dataset(
            child_seed(cfg.seed, 0, 0, "data"),
            *classes,
            *per_class,
            *dim,
            *spread,
        )?),
        DatasetSource::Idx { images, labels } => Ok(crate::learner::load_idx(
            Path::new(images),
            Path::new(labels),
        )?),
        DatasetSource::Csv { path } => Ok(crate::learner::load_csv(Path::new(path))?),
    }
}

/// Reserves `fraction` of the corpus as the test set before partitioning.
fn split_test(data: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng_for(seed));
    let n_test = ((fraction * data.len() as f64).round() as usize).max(1);
    let (test_idx, train_idx) = idx.split_at(n_test);
    let pick = |ids: &[usize]| Dataset {
        features: ids.iter().map(|&i| data.features[i].clone()).collect(),
        labels: ids.iter().map(|&i| data.labels[i]).collect(),
        classes: data.classes,
    };
    (pick(train_idx), pick(test_idx))
}

struct Participant {
    id: ParticipantId,
    data: Dataset,
    model: ParameterVector,
    residual: ParameterVector,
    malicious: bool,
    fixed_eval_subset: Dataset,
}

struct World {
    cfg: SimConfig,
    participants: Vec<Participant>,
    scheme: KeyedHashScheme,
    chain: Chain,
    ledger: StakeLedger,
    malicious: BTreeSet<ParticipantId>,
    test_set: Dataset,
    initial_model: ParameterVector,
}

fn setup(cfg: &SimConfig) -> Result<World, SimError> {
    cfg.validate()?;
    let source = load_source(cfg)?;
    let (train, test_set) = split_test(
        &source,
        cfg.test_fraction,
        child_seed(cfg.seed, 0, 0, "test-split"),
    );
    let parts = partition(&train, cfg.n_participants, child_seed(cfg.seed, 0, 0, "partition"))?;
    let malicious = if cfg.adversary.is_active() {
        assign_malicious(
            cfg.n_participants,
            cfg.adversary.malicious_fraction,
            child_seed(cfg.seed, 0, 0, "malicious"),
        )
    } else {
        BTreeSet::new()
    };
    let initial_model = init_model(child_seed(cfg.seed, 0, 0, "init"), &cfg.learner.model);
    let p = initial_model.len();
    let participants = parts
        .into_iter()
        .enumerate()
        .map(|(i, mut data)| {
            let id = i as ParticipantId;
            let is_malicious = malicious.contains(&id);
            if is_malicious && cfg.adversary.poison_updates {
                data = poison_dataset(&data, &cfg.adversary.flip_pairs);
            }
            let fixed_eval_subset = crate::learner::eval_subset(
                &data,
                cfg.eval_fraction,
                child_seed(cfg.seed, 0, id, "eval-subset"),
            )?;
            Ok(Participant {
                id,
                data,
                model: initial_model.clone(),
                residual: ParameterVector::zeros(p),
                malicious: is_malicious,
                fixed_eval_subset,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(World {
        scheme: KeyedHashScheme::new(child_seed(cfg.seed, 0, 0, "keys"), 0..cfg.n_participants as u64),
        chain: Chain::new(cfg.seed),
        ledger: StakeLedger::uniform(cfg.n_participants, cfg.initial_stake),
        malicious,
        test_set,
        initial_model,
        participants,
        cfg: cfg.clone(),
    })
}

fn eval_subset_for(world: &World, id: ParticipantId, round: u64) -> Result<Dataset, SimError> {
    let participant = &world.participants[id as usize];
    if world.cfg.resample_eval_subset {
        Ok(crate::learner::eval_subset(
            &participant.data,
            world.cfg.eval_fraction,
            child_seed(world.cfg.seed, round, id, "eval-subset"),
        )?)
    } else {
        Ok(participant.fixed_eval_subset.clone())
    }
}

fn malicious_stake_share(ledger: &StakeLedger, malicious: &BTreeSet<ParticipantId>) -> f64 {
    if malicious.is_empty() {
        return 0.0;
    }
    let bad: u64 = malicious.iter().map(|&id| ledger.stake(id)).sum();
    bad as f64 / ledger.total() as f64
}

/// Runs the full protocol for `cfg.rounds` rounds.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    let mut world = setup(cfg)?;
    let schedule = cfg.schedule();
    let agg_cfg = AggregatorConfig::with_default_min(cfg.c);
    let mut metrics = Vec::with_capacity(cfg.rounds as usize);

    for round in 0..cfg.rounds {
        let round_start = Instant::now();

        // Process 1: role selection from the chain tip hash.
        let t = Instant::now();
        let ring = build_ring(&world.ledger)?;
        let roles = select_roles(
            &world.chain.tip_hash(),
            &ring,
            cfg.n_aggregators,
            cfg.n_verifiers,
        )?;
        let role_selection_s = t.elapsed().as_secs_f64();

        // Process 2: providers train locally, accumulate residuals and
        // broadcast signed sparse updates.
        let t = Instant::now();
        let s = sparsity_for_round(round, &schedule);
        let mut inbox: Vec<LocalUpdateMsg> = Vec::new();
        let mut providers_sorted = roles.providers.clone();
        providers_sorted.sort_unstable();
        for &id in &providers_sorted {
            let participant = &world.participants[id as usize];
            let trained = local_train(
                &participant.model,
                &participant.data,
                &cfg.learner,
                round,
                child_seed(cfg.seed, round, id, "train"),
            )?;
            let d = trained.sub(&participant.model)?;
            let carried = participant.residual.add(&d)?;
            let (sparse, residual) = if cfg.compression_enabled {
                match top_k_sparsify(&carried, s) {
                    Ok(pair) => pair,
                    // An all-zero update cannot be transmitted; keep the
                    // mass as residual and skip the broadcast.
                    Err(CompressionError::InvalidSparse(_)) => {
                        world.participants[id as usize].residual = carried;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                }
            } else {
                match dense_to_sparse(&carried) {
                    Some(sparse) => (sparse, ParameterVector::zeros(carried.len())),
                    None => {
                        world.participants[id as usize].residual = carried;
                        continue;
                    }
                }
            };
            let signature = world
                .scheme
                .sign(id, &update_message(round, id, &sparse))
                .expect("registered identity");
            inbox.push(LocalUpdateMsg {
                provider_id: id,
                update: sparse,
                signature,
            });
            world.participants[id as usize].residual = residual;
        }
        if !cfg.persist_residuals {
            for participant in &mut world.participants {
                if !providers_sorted.contains(&participant.id) {
                    participant.residual = ParameterVector::zeros(world.initial_model.len());
                }
            }
        }
        let local_training_s = t.elapsed().as_secs_f64();

        // Process 3: aggregators build candidate global updates.
        let t = Instant::now();
        let mut candidates: Vec<CandidateGlobalUpdate> = Vec::new();
        for &id in &roles.aggregators {
            let subset = eval_subset_for(&world, id, round)?;
            let participant = &world.participants[id as usize];
            let seed = child_seed(cfg.seed, round, id, "aggregate");
            let result = if participant.malicious && cfg.adversary.malicious_aggregators {
                malicious_aggregate(
                    id,
                    &inbox,
                    &cfg.learner.model,
                    &participant.model,
                    &subset,
                    cfg.c,
                    round,
                    seed,
                    &world.scheme,
                )
            } else {
                run_aggregator(
                    id,
                    &inbox,
                    &cfg.learner.model,
                    &participant.model,
                    &subset,
                    &world.ledger,
                    &agg_cfg,
                    round,
                    seed,
                    &world.scheme,
                )
            };
            match result {
                Ok(candidate) => candidates.push(candidate),
                // An aggregator that cannot assemble a candidate simply
                // stays silent this round.
                Err(_) => continue,
            }
        }
        let aggregation_s = t.elapsed().as_secs_f64();

        // Process 4: verification, consensus and block creation.
        let t = Instant::now();
        let mut verifiers: Vec<Verifier> = roles
            .verifiers
            .iter()
            .map(|&id| {
                let dishonest = world.participants[id as usize].malicious
                    && cfg.adversary.malicious_verifiers;
                Verifier::new(id, !dishonest, cfg.krum_f)
            })
            .collect();
        let mut outcome = run_round(round, &candidates, &mut verifiers, cfg.krum_f, &world.scheme)?;
        let leader = roles.leader();
        let leader_malicious =
            world.participants[leader as usize].malicious && cfg.adversary.malicious_verifiers;
        if leader_malicious {
            outcome = malicious_leader_behavior(outcome);
        }

        let (payload, votes, stake_increments) = match &outcome.approved {
            Some(candidate) => {
                let mut awardees: Vec<ParticipantId> = candidate.provider_ids.clone();
                awardees.push(candidate.aggregator_id);
                awardees.extend(&outcome.supporting_verifier_ids);
                awardees.sort_unstable();
                awardees.dedup();
                (
                    Some(candidate.as_payload()),
                    outcome.votes.clone(),
                    awardees
                        .into_iter()
                        .map(|id| (id, cfg.stake_increment))
                        .collect(),
                )
            }
            None => (None, Vec::new(), Vec::new()),
        };
        let mut block = Block {
            round: round as i64,
            prev_hash: world.chain.tip_hash(),
            payload,
            votes,
            stake_increments,
            creator_id: leader,
            creator_signature: Signature([0u8; 32]),
        };
        block.creator_signature = world
            .scheme
            .sign(leader, &presign_bytes(&block))
            .expect("leader is registered");
        world
            .chain
            .validate_and_append(block, &mut world.ledger, cfg.n_verifiers, &world.scheme)?;

        // Every participant applies the approved update.
        let tip = world.chain.tip().clone();
        if let Some(approved) = &tip.payload {
            for participant in &mut world.participants {
                participant.model = participant
                    .model
                    .add(&approved.global_update)
                    ?;
            }
        }
        let consensus_s = t.elapsed().as_secs_f64();
        let round_total_s = round_start.elapsed().as_secs_f64();

        // Metrics (outside the protocol timers except for its own slot).
        let t = Instant::now();
        let accuracy = if round % cfg.eval_every == 0 || round + 1 == cfg.rounds {
            Some(evaluate(
                &cfg.learner.model,
                &world.participants[0].model,
                &world.test_set,
            ))
        } else {
            None
        };
        let evaluation_s = t.elapsed().as_secs_f64();
        let empty_block = tip.payload.is_none();
        let poisoned_block = tip
            .payload
            .as_ref()
            .map(|p| p.provider_ids.iter().any(|id| world.malicious.contains(id)))
            .unwrap_or(false);
        metrics.push(RoundMetrics {
            round,
            accuracy,
            empty_block,
            poisoned_block,
            malicious_stake_share: malicious_stake_share(&world.ledger, &world.malicious),
            timings: ProcessTimings {
                role_selection_s,
                local_training_s,
                aggregation_s,
                consensus_s,
                evaluation_s,
                round_total_s,
            },
        });
    }

    let summary = summarize(&metrics, cfg.rounds);
    let final_models = world
        .participants
        .iter()
        .map(|p| (p.id, p.model.clone()))
        .collect();
    Ok(SimOutput {
        log: MetricsLog {
            config: cfg.clone(),
            rounds: metrics,
            summary,
        },
        chain: world.chain,
        ledger: world.ledger,
        initial_model: world.initial_model,
        final_models,
        test_set: world.test_set,
    })
}

/// Centralized vanilla federated averaging with the same data, model and
/// seeds: every participant trains a dense update each round and a trusted
/// server averages all of them.
pub fn run_fedavg_baseline(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    let mut world = setup(cfg)?;
    let mut metrics = Vec::with_capacity(cfg.rounds as usize);
    let n = cfg.n_participants;
    let initial_share = world.malicious.len() as f64 / n as f64;

    for round in 0..cfg.rounds {
        let round_start = Instant::now();
        let t = Instant::now();
        let mut updates: Vec<ParameterVector> = Vec::with_capacity(n);
        for id in 0..n as u64 {
            let participant = &world.participants[id as usize];
            let trained = local_train(
                &participant.model,
                &participant.data,
                &cfg.learner,
                round,
                child_seed(cfg.seed, round, id, "train"),
            )?;
            updates.push(trained.sub(&participant.model)?);
        }
        let local_training_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let mut mean = ParameterVector::zeros(world.initial_model.len());
        for update in &updates {
            mean = mean.add(update)?;
        }
        let mean = mean.scale(1.0 / n as f64);
        for participant in &mut world.participants {
            participant.model = participant.model.add(&mean)?;
        }
        let aggregation_s = t.elapsed().as_secs_f64();
        let round_total_s = round_start.elapsed().as_secs_f64();

        let t = Instant::now();
        let accuracy = if round % cfg.eval_every == 0 || round + 1 == cfg.rounds {
            Some(evaluate(
                &cfg.learner.model,
                &world.participants[0].model,
                &world.test_set,
            ))
        } else {
            None
        };
        let evaluation_s = t.elapsed().as_secs_f64();
        metrics.push(RoundMetrics {
            round,
            accuracy,
            empty_block: false,
            // Every update is averaged in, so any poisoning provider
            // poisons the global update.
            poisoned_block: !world.malicious.is_empty() && cfg.adversary.poison_updates,
            malicious_stake_share: initial_share,
            timings: ProcessTimings {
                role_selection_s: 0.0,
                local_training_s,
                aggregation_s,
                consensus_s: 0.0,
                evaluation_s,
                round_total_s,
            },
        });
    }

    let summary = summarize(&metrics, cfg.rounds);
    let final_models = world
        .participants
        .iter()
        .map(|p| (p.id, p.model.clone()))
        .collect();
    Ok(SimOutput {
        log: MetricsLog {
            config: cfg.clone(),
            rounds: metrics,
            summary,
        },
        chain: world.chain,
        ledger: world.ledger,
        initial_model: world.initial_model,
        final_models,
        test_set: world.test_set,
    })
}

/// Summary over the trailing `ceil(0.2 * rounds)` evaluated rounds.
pub fn summarize(rounds: &[RoundMetrics], total_rounds: u64) -> Summary {
    assert!(!rounds.is_empty(), "summarize requires a nonempty log");
    let window = ((0.2 * total_rounds as f64).ceil() as usize).max(1);
    let window_start = rounds.len().saturating_sub(window);
    let tail = &rounds[window_start..];
    let accs: Vec<f64> = tail.iter().filter_map(|r| r.accuracy).collect();
    let (mean, std) = if accs.is_empty() {
        (0.0, 0.0)
    } else {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        (mean, var.sqrt())
    };
    let non_empty = tail.iter().filter(|r| !r.empty_block).count();
    let poisoned = tail.iter().filter(|r| r.poisoned_block).count();
    let (attack_ratio, degenerate) = if non_empty == 0 {
        (0.0, true)
    } else {
        (poisoned as f64 / non_empty as f64, false)
    };
    let empty_total = rounds.iter().filter(|r| r.empty_block).count();
    Summary {
        window_rounds: accs.len(),
        mean_accuracy: mean,
        std_accuracy: std,
        attack_ratio,
        attack_ratio_degenerate: degenerate,
        empty_block_pct: 100.0 * empty_total as f64 / rounds.len() as f64,
        final_malicious_stake_share: rounds.last().unwrap().malicious_stake_share,
    }
}

/// CSV column order is fixed: round, accuracy, empty_block, poisoned_block,
/// malicious_stake_share. Timings are deliberately excluded so exports are
/// byte-identical across identical runs.
pub fn export_csv(log: &MetricsLog, path: &Path) -> Result<(), SimError> {
    let mut out = String::from("round,accuracy,empty_block,poisoned_block,malicious_stake_share\n");
    for r in &log.rounds {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.round, acc, r.empty_block, r.poisoned_block, r.malicious_stake_share
        ));
    }
    std::fs::write(path, out).map_err(|source| SimError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn export_json(log: &MetricsLog, path: &Path) -> Result<(), SimError> {
    let text = serde_json::to_string_pretty(log)
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| SimError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Independent chain replayer: re-validates every block from genesis with
/// a fresh ledger and signature registry derived from the config, then
/// folds the approved updates over the reconstructed initial model. Reads
/// nothing from the simulator state.
pub fn replay_chain(chain: &Chain, cfg: &SimConfig) -> Result<ParameterVector, SimError> {
    cfg.validate()?;
    let scheme = KeyedHashScheme::new(
        child_seed(cfg.seed, 0, 0, "keys"),
        0..cfg.n_participants as u64,
    );
    let expected_genesis = Chain::new(cfg.seed);
    if chain.blocks()[0] != *expected_genesis.tip() {
        return Err(SimError::Replay("genesis does not match config".into()));
    }
    let mut rebuilt = Chain::new(cfg.seed);
    let mut ledger = StakeLedger::uniform(cfg.n_participants, cfg.initial_stake);
    let mut model = init_model(child_seed(cfg.seed, 0, 0, "init"), &cfg.learner.model);
    for block in &chain.blocks()[1..] {
        rebuilt
            .validate_and_append(block.clone(), &mut ledger, cfg.n_verifiers, &scheme)?;
        if let Some(approved) = &block.payload {
            model = model
                .add(&approved.global_update)
                .map_err(|e| SimError::Replay(e.to_string()))?;
        }
    }
    if rebuilt.tip_hash() != chain.tip_hash() {
        return Err(SimError::Replay("tip hash mismatch after replay".into()));
    }
    Ok(model)
}

/// Desk-scale default configuration: 30 participants, softmax regression
/// on synthetic 10-class blobs.
pub fn default_config() -> SimConfig {
    use crate::learner::{ModelKind, ModelSpec};
    SimConfig {
        n_participants: 30,
        n_aggregators: 6,
        n_verifiers: 7,
        c: 3,
        rounds: 60,
        learner: LearnerConfig {
            learning_rate: 0.1,
            decay: 0.99,
            batch_size: 16,
            local_epochs: 5,
            model: ModelSpec::new(16, 10, ModelKind::SoftmaxRegression).expect("valid dims"),
        },
        sparsity_levels: vec![0.90, 0.925, 0.95, 0.975],
        sparsity_period: 50,
        compression_enabled: true,
        initial_stake: 10,
        stake_increment: 5,
        eval_fraction: 0.2,
        krum_f: 0.4,
        adversary: AdversaryConfig::disabled(),
        seed: 0,
        dataset: DatasetSource::Synthetic {
            classes: 10,
            per_class: 500,
            dim: 16,
            spread: 1.25,
        },
        test_fraction: 0.2,
        eval_every: 1,
        persist_residuals: true,
        resample_eval_subset: false,
    }
}
