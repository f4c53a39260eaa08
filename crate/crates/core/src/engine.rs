//! One federated training round: distribute the global model, run probing
//! training on the sampled clients, apply a selection mask, finish local
//! training on the selected clients, aggregate their weighted deltas, and
//! score the new global model.
//!
//! Rounds are sequential; within a round, per-client local training runs in
//! parallel. Every client owns an independent RNG stream derived from
//! `(master seed, round, client id)`, so results do not depend on thread
//! scheduling or on which other clients were sampled.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::nn::{self, Batch, MlpSpec, ParamVector};
use crate::traces::{self, ClientProfile, LatencyDraw, TraceTable};
use crate::{rng, Error, Result};

/// Local-training hyperparameters shared by all clients.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FlParams {
    pub lr: f64,
    pub batch_size: usize,
    /// Epochs a selected client runs after the probing epoch.
    pub post_probe_epochs: usize,
}

impl Default for FlParams {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 10,
            post_probe_epochs: 5,
        }
    }
}

/// Everything a round needs besides the global model: the task network,
/// per-client shards, the held-out test set, client profiles and traces.
#[derive(Debug, Clone)]
pub struct FlEnv {
    pub task_spec: MlpSpec,
    pub client_batches: Vec<Batch>,
    pub test_batch: Batch,
    pub profiles: Vec<ClientProfile>,
    pub traces: TraceTable,
    pub fl: FlParams,
}

impl FlEnv {
    pub fn n_clients(&self) -> usize {
        self.profiles.len()
    }
}

/// Server-side state: current round, global parameters, accuracy history
/// (index 0 is the accuracy of the initial model).
#[derive(Debug, Clone)]
pub struct GlobalState {
    pub round: usize,
    pub params: ParamVector,
    pub acc_history: Vec<f64>,
}

impl GlobalState {
    pub fn new(params: ParamVector, initial_acc: f64) -> Self {
        Self {
            round: 1,
            params,
            acc_history: vec![initial_acc],
        }
    }

    pub fn current_acc(&self) -> f64 {
        *self.acc_history.last().unwrap()
    }
}

/// Everything recorded about one round; the unit of reporting.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub clients: Vec<usize>,
    pub probe_loss: Vec<f64>,
    pub probe_lat: Vec<f64>,
    pub mask: Vec<u8>,
    pub rest_lat: Vec<f64>,
    pub upload_lat: Vec<f64>,
    pub download_lat: Vec<f64>,
    #[serde(rename = "H_t")]
    pub h_t: f64,
    #[serde(rename = "B_t")]
    pub b_t: f64,
    pub acc: f64,
    pub reward: f64,
}

/// Top-1 accuracy of the model on a labeled batch, as a fraction.
pub fn evaluate_accuracy(params: &ParamVector, spec: &MlpSpec, test: &Batch) -> Result<f64> {
    let logits = nn::forward_logits(params, spec, test.inputs(), test.n())?;
    let m = spec.output_dim;
    let mut correct = 0usize;
    for i in 0..test.n() {
        let row = &logits[i * m..(i + 1) * m];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == test.labels()[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.n() as f64)
}

/// Minibatch SGD over a shard for a number of epochs, shuffled per epoch.
/// Returns the final parameters and the mean minibatch loss of the first
/// epoch (the probing loss). When the batch covers the whole shard, example
/// order is kept fixed so full-batch training is bitwise-reproducible
/// against a plain SGD loop.
pub(crate) fn train_epochs(
    start: &ParamVector,
    spec: &MlpSpec,
    shard: &Batch,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(ParamVector, f64)> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let n = shard.n();
    let full_batch = batch_size >= n;
    let mut params = start.clone();
    let mut first_epoch_loss = 0.0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if !full_batch {
            use rand::seq::SliceRandom;
            order.shuffle(rng);
        }
        let mut losses_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let minibatch = shard.select(chunk)?;
            let (loss, grad) = nn::loss_and_grad(&params, spec, &minibatch)?;
            params = nn::sgd_step(&params, &grad, lr)?;
            losses_sum += loss;
            n_batches += 1;
        }
        if epoch == 0 {
            first_epoch_loss = losses_sum / n_batches as f64;
        }
    }
    Ok((params, first_epoch_loss))
}

/// Runs local training and returns the weight delta (final minus initial)
/// together with the first-epoch mean loss.
pub fn local_train(
    params: &ParamVector,
    spec: &MlpSpec,
    shard: &Batch,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(ParamVector, f64)> {
    if epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be >= 1".into()));
    }
    let (final_params, first_epoch_loss) =
        train_epochs(params, spec, shard, epochs, lr, batch_size, rng)?;
    Ok((final_params.sub(params)?, first_epoch_loss))
}

/// Post-probe client state: parameters after the probing epoch plus the
/// training RNG, so a selected client continues instead of restarting.
#[derive(Debug, Clone)]
pub struct CachedClient {
    pub params: ParamVector,
    pub rng: ChaCha12Rng,
}

/// Output of the probing phase over the sampled clients.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub losses: Vec<f64>,
    pub draws: Vec<LatencyDraw>,
    pub download_lat: Vec<f64>,
    pub cached: Vec<CachedClient>,
}

impl ProbeResult {
    pub fn probe_latencies(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.probe).collect()
    }
}

/// Runs exactly one epoch of local training on every sampled client from
/// the current global model, draws its latencies, and caches the post-probe
/// state.
pub fn probing_phase(
    env: &FlEnv,
    global: &GlobalState,
    sampled: &[usize],
    master: u64,
    round: u64,
) -> Result<ProbeResult> {
    if sampled.is_empty() {
        return Err(Error::InvalidConfig("no sampled clients".into()));
    }
    let per_client: Vec<Result<(f64, LatencyDraw, f64, CachedClient)>> = sampled
        .par_iter()
        .map(|&client| {
            let profile = &env.profiles[client];
            let shard = &env.client_batches[client];
            let mut train_rng = rng::stream(master, "local-train", &[round, client as u64]);
            let mut lat_rng = rng::stream(master, "latency", &[round, client as u64]);
            let (params, loss) = train_epochs(
                &global.params,
                &env.task_spec,
                shard,
                1,
                env.fl.lr,
                env.fl.batch_size,
                &mut train_rng,
            )?;
            let draw =
                traces::sample_latency(&env.traces, profile, env.fl.post_probe_epochs, &mut lat_rng)?;
            let download = traces::sample_download(&env.traces, profile, &mut lat_rng)?;
            Ok((
                loss,
                draw,
                download,
                CachedClient {
                    params,
                    rng: train_rng,
                },
            ))
        })
        .collect();

    let mut losses = Vec::with_capacity(sampled.len());
    let mut draws = Vec::with_capacity(sampled.len());
    let mut download_lat = Vec::with_capacity(sampled.len());
    let mut cached = Vec::with_capacity(sampled.len());
    for item in per_client {
        let (loss, draw, download, cache) = item?;
        losses.push(loss);
        draws.push(draw);
        download_lat.push(download);
        cached.push(cache);
    }
    Ok(ProbeResult {
        losses,
        draws,
        download_lat,
        cached,
    })
}

/// Total round latency: slowest probe over all sampled clients plus the
/// slowest (remaining training + upload) over the selected ones.
pub fn round_latency(
    probe_lat: &[f64],
    rest_lat: &[f64],
    upload_lat: &[f64],
    mask: &[u8],
) -> f64 {
    let max_probe = probe_lat.iter().cloned().fold(0.0, f64::max);
    let mut max_rest = 0.0f64;
    for (i, &a) in mask.iter().enumerate() {
        if a != 0 {
            max_rest = max_rest.max(rest_lat[i] + upload_lat[i]);
        }
    }
    max_probe + max_rest
}

/// Total round communication cost: per-client cost summed over the
/// selected clients.
pub fn round_comm_cost(costs: &[f64], mask: &[u8]) -> f64 {
    costs
        .iter()
        .zip(mask)
        .filter(|&(_, &a)| a != 0)
        .map(|(&c, _)| c)
        .sum()
}

/// Data-size-weighted average over the selected clients' final models:
/// `Σ w_n · final_n` with `w_n = D_n / Σ_selected D_n`. This equals applying
/// the weighted mean of the deltas to the base model, and makes the
/// single-selected-client case bitwise exact (`w = 1`).
pub fn aggregate_weighted(
    finals: &[ParamVector],
    sizes: &[f64],
    mask: &[u8],
) -> Result<ParamVector> {
    if mask.len() != finals.len() || sizes.len() != finals.len() {
        return Err(Error::DimensionMismatch(
            "finals, sizes and mask must have equal length".into(),
        ));
    }
    if mask.iter().all(|&a| a == 0) {
        return Err(Error::EmptyMask);
    }
    let total: f64 = sizes
        .iter()
        .zip(mask)
        .filter(|&(_, &a)| a != 0)
        .map(|(&d, _)| d)
        .sum();
    let first = mask.iter().position(|&a| a != 0).unwrap();
    let mut out = ParamVector::zeros(finals[first].layout().clone());
    for (i, params) in finals.iter().enumerate() {
        if mask[i] != 0 {
            out.axpy(sizes[i] / total, params)?;
        }
    }
    Ok(out)
}

/// Finishes the round for the selected clients and aggregates: each runs
/// `post_probe_epochs` more epochs from its cached state, deltas are
/// weighted by data size over the selected clients only, and the new global
/// model is scored on the held-out test set.
pub fn complete_and_aggregate(
    env: &FlEnv,
    global: &GlobalState,
    sampled: &[usize],
    mask: &[u8],
    probe: ProbeResult,
) -> Result<(GlobalState, RoundRecord)> {
    if mask.len() != sampled.len() {
        return Err(Error::DimensionMismatch(
            "mask length != sampled clients".into(),
        ));
    }
    if mask.iter().all(|&a| a == 0) {
        return Err(Error::EmptyMask);
    }
    let ProbeResult {
        losses,
        draws,
        download_lat,
        cached,
    } = probe;
    let finals: Vec<Result<ParamVector>> = cached
        .into_par_iter()
        .enumerate()
        .map(|(slot, cache)| {
            if mask[slot] == 0 {
                // Early-rejected: the probe-epoch work is discarded. The
                // placeholder is never weighted into the aggregate.
                return Ok(global.params.clone());
            }
            let client = sampled[slot];
            let mut rng = cache.rng;
            let (final_params, _) = train_epochs(
                &cache.params,
                &env.task_spec,
                &env.client_batches[client],
                env.fl.post_probe_epochs,
                env.fl.lr,
                env.fl.batch_size,
                &mut rng,
            )?;
            Ok(final_params)
        })
        .collect();
    let finals: Vec<ParamVector> = finals.into_iter().collect::<Result<_>>()?;

    let sizes: Vec<f64> = sampled
        .iter()
        .map(|&c| env.profiles[c].data_size as f64)
        .collect();
    let new_params = aggregate_weighted(&finals, &sizes, mask)?;

    let probe_lat: Vec<f64> = draws.iter().map(|d| d.probe).collect();
    let rest_lat: Vec<f64> = draws.iter().map(|d| d.rest).collect();
    let upload_lat: Vec<f64> = draws.iter().map(|d| d.upload).collect();
    let costs: Vec<f64> = sampled
        .iter()
        .map(|&c| traces::comm_cost(&env.traces, &env.profiles[c]))
        .collect();
    let h_t = round_latency(&probe_lat, &rest_lat, &upload_lat, mask);
    let b_t = round_comm_cost(&costs, mask);
    let acc = evaluate_accuracy(&new_params, &env.task_spec, &env.test_batch)?;

    let record = RoundRecord {
        t: global.round,
        clients: sampled.to_vec(),
        probe_loss: losses,
        probe_lat,
        mask: mask.to_vec(),
        rest_lat,
        upload_lat,
        download_lat,
        h_t,
        b_t,
        acc,
        reward: 0.0,
    };
    let mut acc_history = global.acc_history.clone();
    acc_history.push(acc);
    Ok((
        GlobalState {
            round: global.round + 1,
            params: new_params,
            acc_history,
        },
        record,
    ))
}

/// Round records as JSON lines, one object per round.
pub fn write_records_jsonl(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = std::fs::File::open(path)?;
    let name = path.display().to_string();
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| Error::Malformed {
                file: name.clone(),
                line: lineno + 1,
                msg: e.to_string(),
            })?,
        );
    }
    Ok(records)
}
