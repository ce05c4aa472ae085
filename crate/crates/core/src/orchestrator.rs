//! The round protocol: distribute, train locally, upload (with block
//! dropout and delta quantization when enabled), reconstruct, aggregate —
//! over a two-stage schedule, with every byte that crosses the simulated
//! channel accounted for in the run report.

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::aggregate::{apply_deltas, fedavg, reconstruct_client, ClientUpdate, WeightedModel};
use crate::error::{Error, Result};
use crate::model::BlockedModel;
use crate::obd::{score_all, select_by_scores, ContributionLogEntry, DropoutConfig};
use crate::quant::encode_delta;
use crate::rng::derive_rng;
use crate::trainer::{evaluate, init_model, local_train, BlobTask, Dataset, Metrics, MlpSpec};
use crate::transport::{Channel, MessagePayload, RoundMessage};

/// File name under which a run's dropout decisions are persisted.
pub const CONTRIBUTION_LOG_FILE: &str = "contribution.log";

const SERVER_ID: &str = "server";

/// Loss-plateau detection: stage 1 ends early once the evaluation loss has
/// improved by less than this for [`PLATEAU_PATIENCE`] consecutive rounds.
const PLATEAU_MIN_IMPROVEMENT: f64 = 1e-4;
const PLATEAU_PATIENCE: u32 = 3;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Full models both ways, every round.
    FedAvg,
    /// Opportunistic block dropout plus quantized deltas.
    FedObd,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedObd => "fedobd",
        })
    }
}

/// Where the training and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian blobs generated from the run seed; every client draws
    /// i.i.d. samples from the same class centers.
    Synthetic {
        classes: usize,
        dim: usize,
        noise: f64,
        samples_per_client: usize,
        test_samples: usize,
    },
    /// Delimited text files, one per client plus one test set.
    Files { train: Vec<PathBuf>, test: PathBuf },
}

/// Network architecture; input and output widths come from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

fn default_stage1_epochs() -> u32 {
    1
}
fn default_stage2_epochs() -> u32 {
    2
}
fn default_batch_size() -> usize {
    32
}

/// Everything a run needs. One root seed drives all randomness.
/// Deserialization rejects unknown keys so config typos fail loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub algorithm: Algorithm,
    pub n_clients: usize,
    /// Fraction of model size dropped from every transmission (0 = send
    /// all, 1 = send nothing). Must be 0 in fedavg mode.
    #[serde(default)]
    pub lambda: f64,
    /// Quantization step as a fraction of each tensor's value range.
    /// `None` disables quantization (full models go on the wire).
    #[serde(default)]
    pub quant_weight: Option<f64>,
    pub stage1_rounds: u32,
    #[serde(default = "default_stage1_epochs")]
    pub stage1_epochs: u32,
    /// Stage 2 fine-tuning: this many single-epoch rounds, aggregating
    /// after each.
    #[serde(default = "default_stage2_epochs")]
    pub stage2_epochs: u32,
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// When set, stage 1 may end before `stage1_rounds` once the loss
    /// plateaus. Off by default so round counts are fixed up front.
    #[serde(default)]
    pub stage1_plateau: bool,
    /// Simulated channel capacity; `None` models an uncapped link.
    #[serde(default)]
    pub bandwidth_bytes_per_sec: Option<u64>,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::invalid("n_clients must be at least 1"));
        }
        if !(self.lambda.is_finite() && (0.0..=1.0).contains(&self.lambda)) {
            return Err(Error::invalid(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if let Some(w) = self.quant_weight {
            if !(w.is_finite() && w > 0.0 && w <= 1.0) {
                return Err(Error::invalid(format!(
                    "quant_weight must lie in (0, 1], got {w}"
                )));
            }
        }
        if self.stage1_rounds == 0 || self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return Err(Error::invalid(
                "stage1_rounds, stage1_epochs, and stage2_epochs must all be positive",
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.bandwidth_bytes_per_sec == Some(0) {
            return Err(Error::invalid("bandwidth_bytes_per_sec must be positive"));
        }
        match self.algorithm {
            Algorithm::FedAvg => {
                if self.lambda != 0.0 {
                    return Err(Error::invalid("fedavg mode requires lambda = 0"));
                }
                if self.quant_weight.is_some() {
                    return Err(Error::invalid("fedavg mode does not quantize; unset quant_weight"));
                }
            }
            Algorithm::FedObd => {
                if self.lambda > 0.0 && self.quant_weight.is_none() {
                    return Err(Error::invalid(
                        "partial uploads need a quantization weight; set quant_weight or use lambda = 0",
                    ));
                }
            }
        }
        match &self.dataset {
            DatasetSpec::Synthetic { classes, dim, noise, samples_per_client, test_samples } => {
                if *classes < 2 || *dim == 0 {
                    return Err(Error::invalid("synthetic data needs >= 2 classes and dim >= 1"));
                }
                if !(noise.is_finite() && *noise > 0.0) {
                    return Err(Error::invalid("synthetic noise must be positive"));
                }
                if *samples_per_client == 0 || *test_samples == 0 {
                    return Err(Error::invalid("sample counts must be positive"));
                }
            }
            DatasetSpec::Files { train, test: _ } => {
                if train.len() != self.n_clients {
                    return Err(Error::invalid(format!(
                        "{} training files for {} clients",
                        train.len(),
                        self.n_clients
                    )));
                }
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }

    /// Whether every message carries a full model (no dropout, no
    /// quantization): fedavg mode, or fedobd with quantization disabled.
    fn full_exchange(&self) -> bool {
        matches!(self.algorithm, Algorithm::FedAvg) || self.quant_weight.is_none()
    }
}

// ---------------------------------------------------------------------------
// Run artifacts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Round 0: initial full-model distribution, no training.
    Init,
    Stage1,
    Stage2,
}

/// One protocol round as it appears in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub phase: Phase,
    /// Serialized bytes each client sent this round.
    pub upload_bytes: BTreeMap<String, u64>,
    /// Serialized bytes each client received this round.
    pub download_bytes: BTreeMap<String, u64>,
    /// Test metrics of the aggregated global model (round 0: the initial
    /// model).
    pub metrics: Metrics,
}

/// The reproducible summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub algorithm: Algorithm,
    pub n_clients: usize,
    pub lambda: f64,
    pub quant_weight: Option<f64>,
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
    pub total_upload_bytes: u64,
    pub total_download_bytes: u64,
    pub total_bytes: u64,
    /// Transfer-bound time under the configured bandwidth cap; compute
    /// time is deliberately excluded.
    pub wall_clock_secs: Option<f64>,
    pub final_metrics: Metrics,
    /// Name of the dropout-decision log artifact accompanying the report.
    pub contribution_log: String,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// One entry per dropout decision (client uploads and server
    /// distributions); empty when nothing is ever dropped.
    pub contributions: Vec<ContributionLogEntry>,
    /// The aggregated global model of every round, index = round index
    /// (entry 0 is the initial model).
    pub round_globals: Vec<BlockedModel>,
    pub final_model: BlockedModel,
}

/// Short-term model store: server and clients keep exactly the previous
/// and current rounds' models, which is all the protocol ever consults.
#[derive(Debug, Clone, Default)]
pub struct ModelLog {
    retained: VecDeque<(u32, BlockedModel)>,
}

impl ModelLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&mut self, round: u32, model: BlockedModel) {
        if self.retained.len() == 2 {
            self.retained.pop_front();
        }
        self.retained.push_back((round, model));
    }

    pub fn load(&self, round: u32) -> Result<&BlockedModel> {
        self.retained
            .iter()
            .find(|(r, _)| *r == round)
            .map(|(_, m)| m)
            .ok_or_else(|| {
                let have: Vec<u32> = self.retained.iter().map(|(r, _)| *r).collect();
                Error::MissingState(format!(
                    "model for round {round} is not retained (have {have:?})"
                ))
            })
    }
}

/// Transfer-bound time to move `total_bytes` through a link of
/// `bytes_per_sec`.
pub fn wall_clock_estimate(total_bytes: u64, bytes_per_sec: u64) -> f64 {
    debug_assert!(bytes_per_sec > 0);
    total_bytes as f64 / bytes_per_sec as f64
}

// ---------------------------------------------------------------------------
// The protocol

struct ClientState {
    id: String,
    data: Dataset,
    log: ModelLog,
}

fn client_id(index: usize) -> String {
    format!("client_{index:03}")
}

fn build_datasets(cfg: &RunConfig) -> Result<(Vec<Dataset>, Dataset)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic { classes, dim, noise, samples_per_client, test_samples } => {
            let mut task_rng = derive_rng(cfg.seed, &["task"]);
            let task = BlobTask::new(*classes, *dim, *noise, &mut task_rng)?;
            let train = (0..cfg.n_clients)
                .map(|i| {
                    let mut rng = derive_rng(cfg.seed, &["data", &client_id(i)]);
                    task.sample(*samples_per_client, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let test = task.sample(*test_samples, &mut derive_rng(cfg.seed, &["test-data"]))?;
            Ok((train, test))
        }
        DatasetSpec::Files { train, test } => {
            let mut sets = train
                .iter()
                .map(|p| Dataset::from_delimited_file(p))
                .collect::<Result<Vec<_>>>()?;
            let test_set = Dataset::from_delimited_file(test)?;
            // Files infer their class count independently; give every set
            // the run-wide maximum so model dimensions agree.
            let classes = sets
                .iter()
                .chain(std::iter::once(&test_set))
                .map(Dataset::num_classes)
                .max()
                .unwrap();
            let widen = |d: &Dataset| {
                Dataset::new(d.features().to_vec(), d.labels().to_vec(), classes)
            };
            for s in &mut sets {
                *s = widen(s)?;
            }
            Ok((sets, widen(&test_set)?))
        }
    }
}

/// Execute a full federated run. Deterministic: identical configs produce
/// identical outputs, bit for bit.
pub fn run_federated(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train_sets, test_set) = build_datasets(cfg)?;

    let feature_dim = train_sets[0].feature_dim();
    let classes = test_set.num_classes();
    let mut widths = Vec::with_capacity(cfg.model.hidden.len() + 2);
    widths.push(feature_dim);
    widths.extend_from_slice(&cfg.model.hidden);
    widths.push(classes);
    let spec = MlpSpec::new(widths, cfg.seed)?;

    let dropout = DropoutConfig::new(cfg.lambda)?;
    let full_exchange = cfg.full_exchange();
    let channel = Channel::new(cfg.bandwidth_bytes_per_sec);

    let mut clients: Vec<ClientState> = train_sets
        .into_iter()
        .enumerate()
        .map(|(i, data)| ClientState { id: client_id(i), data, log: ModelLog::new() })
        .collect();
    let mut server_log = ModelLog::new();
    let mut contributions: Vec<ContributionLogEntry> = Vec::new();
    let mut records: Vec<RoundRecord> = Vec::new();
    let mut round_globals: Vec<BlockedModel> = Vec::new();

    // Round 0: the one unconditional full-model broadcast.
    let initial = init_model(&spec)?;
    server_log.store(0, initial.clone());
    let mut download0 = BTreeMap::new();
    let upload0: BTreeMap<String, u64> =
        clients.iter().map(|c| (c.id.clone(), 0)).collect();
    for client in &mut clients {
        let rec = channel.send(&RoundMessage::full_model(0, SERVER_ID, 0, initial.clone()));
        let msg = channel.recv_from(SERVER_ID)?;
        let model = expect_full_model(msg, 0)?;
        if !model.bits_eq(&initial) {
            return Err(Error::Protocol(format!(
                "round 0: {} decoded a model that differs from the server's",
                client.id
            )));
        }
        client.log.store(0, model);
        download0.insert(client.id.clone(), rec.bytes);
    }
    let init_metrics = evaluate(&initial, &test_set)?;
    records.push(RoundRecord {
        round: 0,
        phase: Phase::Init,
        upload_bytes: upload0,
        download_bytes: download0,
        metrics: init_metrics,
    });
    round_globals.push(initial);

    // Plateau tracking for the optional early stage-1 exit.
    let mut stage1_end = cfg.stage1_rounds;
    let mut prev_loss = init_metrics.loss;
    let mut plateau_streak: u32 = 0;

    let mut round = 1u32;
    loop {
        let phase = if round <= stage1_end { Phase::Stage1 } else { Phase::Stage2 };
        let epochs = match phase {
            Phase::Stage1 => cfg.stage1_epochs,
            _ => 1, // stage 2 aggregates after every single local epoch
        };

        // Clients train and upload.
        let mut upload_bytes = BTreeMap::new();
        let round_str = round.to_string();
        for client in &clients {
            let base = client.log.load(round - 1)?;
            let mut train_rng = derive_rng(cfg.seed, &["train", &round_str, &client.id]);
            let trained =
                local_train(base, &client.data, epochs, cfg.lr, cfg.batch_size, &mut train_rng)?;
            let samples = client.data.sample_count() as u64;
            let msg = if full_exchange {
                RoundMessage::full_model(round, &client.id, samples, trained)
            } else {
                let weight = cfg.quant_weight.expect("validated: quantized mode has a weight");
                let scores = score_all(base, &trained)?;
                let retained = select_by_scores(&scores, &trained, &dropout);
                contributions.push(ContributionLogEntry::new(
                    round,
                    &client.id,
                    scores,
                    retained.iter().map(|b| b.id().clone()).collect(),
                ));
                let deltas = retained
                    .iter()
                    .map(|block| {
                        let prev = base.block(block.id()).expect("retained from same structure");
                        let mut rng = derive_rng(
                            cfg.seed,
                            &["quant", &round_str, &client.id, block.id().as_str()],
                        );
                        encode_delta(prev, block, weight, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                RoundMessage::block_deltas(round, &client.id, samples, deltas)
            };
            upload_bytes.insert(client.id.clone(), channel.send(&msg).bytes);
        }

        // Server receives in canonical order and aggregates.
        let mut weighted = Vec::with_capacity(clients.len());
        for client in &clients {
            let msg = channel.recv_from(&client.id)?;
            if msg.round != round {
                return Err(Error::Protocol(format!(
                    "round {round}: upload from {} is stamped round {}",
                    client.id, msg.round
                )));
            }
            let sample_count = msg.sample_count;
            let model = match msg.payload {
                MessagePayload::FullModel(m) => m,
                MessagePayload::BlockDeltas(deltas) => {
                    let prev = server_log.load(round - 1)?;
                    reconstruct_client(
                        prev,
                        &ClientUpdate {
                            client_id: client.id.clone(),
                            round,
                            sample_count,
                            deltas,
                        },
                    )?
                }
            };
            weighted.push(WeightedModel { client_id: client.id.clone(), model, sample_count });
        }
        let aggregate = fedavg(&weighted, round)?;
        let metrics = evaluate(&aggregate, &test_set)?;
        round_globals.push(aggregate.clone());

        // Optional plateau rule, evaluated only while stage 1 can still
        // shrink.
        if cfg.stage1_plateau && phase == Phase::Stage1 {
            if prev_loss - metrics.loss < PLATEAU_MIN_IMPROVEMENT {
                plateau_streak += 1;
            } else {
                plateau_streak = 0;
            }
            prev_loss = metrics.loss;
            if plateau_streak >= PLATEAU_PATIENCE && round < stage1_end {
                stage1_end = round;
            }
        }

        let is_last = round == stage1_end + cfg.stage2_epochs;
        let mut download_bytes: BTreeMap<String, u64> =
            clients.iter().map(|c| (c.id.clone(), 0)).collect();

        if !is_last {
            // Distribute the new global; the server records exactly what
            // the clients will decode.
            let distributed = if full_exchange {
                for client in &mut clients {
                    let rec = channel
                        .send(&RoundMessage::full_model(round, SERVER_ID, 0, aggregate.clone()));
                    let msg = channel.recv_from(SERVER_ID)?;
                    let model = expect_full_model(msg, round)?;
                    if !model.bits_eq(&aggregate) {
                        return Err(Error::Protocol(format!(
                            "round {round}: {} decoded a model that differs from the server's",
                            client.id
                        )));
                    }
                    client.log.store(round, model);
                    download_bytes.insert(client.id.clone(), rec.bytes);
                }
                aggregate.clone()
            } else {
                let weight = cfg.quant_weight.expect("validated: quantized mode has a weight");
                let prev = server_log.load(round - 1)?.clone();
                let scores = score_all(&prev, &aggregate)?;
                let retained = select_by_scores(&scores, &aggregate, &dropout);
                contributions.push(ContributionLogEntry::new(
                    round,
                    SERVER_ID,
                    scores,
                    retained.iter().map(|b| b.id().clone()).collect(),
                ));
                let deltas = retained
                    .iter()
                    .map(|block| {
                        let prev_block =
                            prev.block(block.id()).expect("retained from same structure");
                        let mut rng = derive_rng(
                            cfg.seed,
                            &["quant", &round_str, SERVER_ID, block.id().as_str()],
                        );
                        encode_delta(prev_block, block, weight, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                // What everyone — server included — holds after this round
                // is the dequantized model, not the raw aggregate.
                let decoded = apply_deltas(&prev, &deltas, round)?;
                for client in &mut clients {
                    let rec = channel
                        .send(&RoundMessage::block_deltas(round, SERVER_ID, 0, deltas.clone()));
                    let msg = channel.recv_from(SERVER_ID)?;
                    let got = match msg.payload {
                        MessagePayload::BlockDeltas(d) if msg.round == round => d,
                        _ => {
                            return Err(Error::Protocol(format!(
                                "round {round}: {} received an unexpected distribution",
                                client.id
                            )))
                        }
                    };
                    let rebuilt = apply_deltas(client.log.load(round - 1)?, &got, round)?;
                    if !rebuilt.bits_eq(&decoded) {
                        return Err(Error::Protocol(format!(
                            "round {round}: {} reconstructed a model that differs from the server's",
                            client.id
                        )));
                    }
                    client.log.store(round, rebuilt);
                    download_bytes.insert(client.id.clone(), rec.bytes);
                }
                decoded
            };
            server_log.store(round, distributed);
        }

        records.push(RoundRecord {
            round,
            phase,
            upload_bytes,
            download_bytes,
            metrics,
        });

        if is_last {
            break;
        }
        round += 1;
    }

    // Totals, cross-checked against the channel's own counters.
    let total_upload_bytes: u64 =
        records.iter().flat_map(|r| r.upload_bytes.values()).sum();
    let total_download_bytes: u64 =
        records.iter().flat_map(|r| r.download_bytes.values()).sum();
    let total_bytes = total_upload_bytes + total_download_bytes;
    if total_bytes != channel.total_bytes() {
        return Err(Error::Protocol(format!(
            "byte accounting mismatch: records sum to {total_bytes}, channel counted {}",
            channel.total_bytes()
        )));
    }

    let final_metrics = records.last().expect("at least round 0 exists").metrics;
    let final_model = round_globals.last().expect("at least the initial model").clone();
    let report = RunReport {
        algorithm: cfg.algorithm,
        n_clients: cfg.n_clients,
        lambda: cfg.lambda,
        quant_weight: cfg.quant_weight,
        seed: cfg.seed,
        rounds: records,
        total_upload_bytes,
        total_download_bytes,
        total_bytes,
        wall_clock_secs: cfg
            .bandwidth_bytes_per_sec
            .map(|b| wall_clock_estimate(total_bytes, b)),
        final_metrics,
        contribution_log: CONTRIBUTION_LOG_FILE.to_string(),
    };
    Ok(RunOutput { report, contributions, round_globals, final_model })
}

fn expect_full_model(msg: RoundMessage, round: u32) -> Result<BlockedModel> {
    if msg.round != round || msg.sender != SERVER_ID {
        return Err(Error::Protocol(format!(
            "round {round}: distribution stamped (round {}, sender {})",
            msg.round, msg.sender
        )));
    }
    match msg.payload {
        MessagePayload::FullModel(m) => Ok(m),
        MessagePayload::BlockDeltas(_) => Err(Error::Protocol(format!(
            "round {round}: expected a full-model distribution"
        ))),
    }
}
