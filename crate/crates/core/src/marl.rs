//! Multi-agent client-selection engine: per-agent state construction,
//! shared-weight Q-networks, and value-decomposition training.
//!
//! One agent per sampled client slot observes the client's probing loss,
//! latency history windows, communication cost, data size and the round
//! index, and outputs a binary participate/terminate decision. All agents
//! evaluate the same network. The joint action value is the sum of the
//! per-agent Q-values, trained by temporal-difference regression against a
//! periodically synced target copy, from a FIFO replay buffer.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::analysis::{round_reward, RewardWeights, UtilityVariant};
use crate::engine::{complete_and_aggregate, evaluate_accuracy, probing_phase, FlEnv, GlobalState};
use crate::nn::{self, Activation, MlpSpec, ParamVector};
use crate::traces::comm_cost;
use crate::{rng, Error, Result};

/// Default probe-latency history window (entries, newest included).
pub const DELTA_T_P_DEFAULT: usize = 3;
/// Default upload-latency history window (entries, current round excluded).
pub const DELTA_T_C_DEFAULT: usize = 5;

/// State vector length for the given history windows: probing loss, the
/// two windows, comm cost, data size, round index.
pub fn state_dim(delta_t_p: usize, delta_t_c: usize) -> usize {
    1 + delta_t_p + delta_t_c + 3
}

/// A normalized per-agent observation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState(pub Vec<f64>);

impl AgentState {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Raw (unnormalized) per-client observation for one round.
#[derive(Debug, Clone)]
pub struct RawObservation {
    pub probing_loss: f64,
    /// Last `delta_t_p` probe latencies, oldest first, current included.
    pub probe_window: Vec<f64>,
    /// Last `delta_t_c` upload latencies, oldest first, current excluded.
    pub upload_window: Vec<f64>,
    pub comm_cost: f64,
    pub data_size: f64,
}

impl RawObservation {
    /// Flat raw feature vector with the round index appended as `t / T`.
    fn assemble(&self, t: usize, total_rounds: usize) -> Vec<f64> {
        let mut raw =
            Vec::with_capacity(state_dim(self.probe_window.len(), self.upload_window.len()));
        raw.push(self.probing_loss);
        raw.extend_from_slice(&self.probe_window);
        raw.extend_from_slice(&self.upload_window);
        raw.push(self.comm_cost);
        raw.push(self.data_size);
        raw.push(t as f64 / total_rounds as f64);
        raw
    }
}

/// Per-feature running z-score statistics (Welford). Updated online during
/// MARL training, frozen at inference; features with near-zero variance
/// normalize to 0, and normalized values are clamped to `[-5, 5]`.
#[derive(Debug, Clone)]
pub struct Normalizer {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    fixed_std: Option<Vec<f64>>,
    frozen: bool,
}

const STD_GUARD: f64 = 1e-8;
const CLAMP: f64 = 5.0;

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            fixed_std: None,
            frozen: false,
        }
    }

    /// Frozen normalizer from stored statistics.
    pub fn from_stats(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::DimensionMismatch(
                "normalizer mean/std length mismatch".into(),
            ));
        }
        Ok(Self {
            count: 1,
            m2: vec![0.0; mean.len()],
            mean,
            fixed_std: Some(std),
            frozen: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn observe(&mut self, raw: &[f64]) {
        debug_assert!(!self.frozen, "observing on a frozen normalizer");
        debug_assert_eq!(raw.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for (i, &x) in raw.iter().enumerate() {
            let delta = x - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x - self.mean[i]);
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> Vec<f64> {
        if let Some(s) = &self.fixed_std {
            return s.clone();
        }
        if self.count == 0 {
            return vec![0.0; self.mean.len()];
        }
        let n = self.count as f64;
        self.m2.iter().map(|&v| (v / n).sqrt()).collect()
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        let std = self.std();
        raw.iter()
            .enumerate()
            .map(|(i, &x)| {
                if std[i] < STD_GUARD {
                    0.0
                } else {
                    ((x - self.mean[i]) / std[i]).clamp(-CLAMP, CLAMP)
                }
            })
            .collect()
    }
}

/// Builds the normalized agent state for round `t` of `total_rounds`. The
/// normalizer is updated first unless frozen.
pub fn build_state(
    obs: &RawObservation,
    t: usize,
    total_rounds: usize,
    normalizer: &mut Normalizer,
) -> Result<AgentState> {
    let raw = obs.assemble(t, total_rounds);
    if raw.len() != normalizer.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} features, normalizer expects {}",
            raw.len(),
            normalizer.dim()
        )));
    }
    if !raw.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("raw observation".into()));
    }
    if !normalizer.frozen {
        normalizer.observe(&raw);
    }
    Ok(AgentState(normalizer.normalize(&raw)))
}

/// Server-side statistics collector: per-client probe and upload latency
/// histories across an episode, exposed as fixed-length windows.
///
/// Windows shorter than the history are padded at the front with the first
/// observed value; before any observation the window is all zeros (uploads
/// only exist once a client has been selected at least once).
#[derive(Debug, Clone)]
pub struct StatsCollector {
    probe_hist: Vec<Vec<f64>>,
    upload_hist: Vec<Vec<f64>>,
    delta_t_p: usize,
    delta_t_c: usize,
}

impl StatsCollector {
    pub fn new(n_clients: usize, delta_t_p: usize, delta_t_c: usize) -> Self {
        Self {
            probe_hist: vec![Vec::new(); n_clients],
            upload_hist: vec![Vec::new(); n_clients],
            delta_t_p,
            delta_t_c,
        }
    }

    pub fn record_probe(&mut self, client: usize, seconds: f64) {
        self.probe_hist[client].push(seconds);
    }

    pub fn record_upload(&mut self, client: usize, seconds: f64) {
        self.upload_hist[client].push(seconds);
    }

    fn window(hist: &[f64], len: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(len);
        if hist.is_empty() {
            w.resize(len, 0.0);
            return w;
        }
        let take = hist.len().min(len);
        for _ in 0..len - take {
            w.push(hist[0]);
        }
        w.extend_from_slice(&hist[hist.len() - take..]);
        w
    }

    pub fn probe_window(&self, client: usize) -> Vec<f64> {
        Self::window(&self.probe_hist[client], self.delta_t_p)
    }

    pub fn upload_window(&self, client: usize) -> Vec<f64> {
        Self::window(&self.upload_hist[client], self.delta_t_c)
    }
}

/// One replay-buffer entry: the joint experience of all agents in a round.
#[derive(Debug, Clone)]
pub struct Transition {
    pub states: Vec<AgentState>,
    pub actions: Vec<u8>,
    pub reward: f64,
    pub next_states: Vec<AgentState>,
    pub terminal: bool,
}

/// Ring buffer of transitions with FIFO eviction.
#[derive(Debug)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity),
            capacity,
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }
}

/// Shared Q-network: one online parameter vector and one target copy,
/// evaluated by every agent.
#[derive(Debug, Clone)]
pub struct QNet {
    pub spec: MlpSpec,
    pub online: ParamVector,
    pub target: ParamVector,
}

impl QNet {
    /// Fresh network; the target starts as a copy of the online weights.
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let online = nn::init_params(&spec, seed);
        let target = online.clone();
        Self {
            spec,
            online,
            target,
        }
    }

    /// From trained parameters (inference): target equals online.
    pub fn from_params(spec: MlpSpec, params: ParamVector) -> Self {
        Self {
            spec,
            online: params.clone(),
            target: params,
        }
    }

    /// Q-values of both actions for a batch of states, row per state.
    fn q_batch(&self, params: &ParamVector, states: &[&AgentState]) -> Result<Vec<[f64; 2]>> {
        let dim = self.spec.input_dim;
        let mut inputs = Vec::with_capacity(states.len() * dim);
        for s in states {
            if s.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "agent state has {} features, network expects {dim}",
                    s.dim()
                )));
            }
            inputs.extend_from_slice(&s.0);
        }
        let logits = nn::forward_logits(params, &self.spec, &inputs, states.len())?;
        Ok(logits.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    /// Q-values of both actions for one state, from the online network.
    pub fn q_pair(&self, state: &AgentState) -> Result<[f64; 2]> {
        Ok(self.q_batch(&self.online, &[state])?[0])
    }
}

/// Copies the online parameters into the target network, bitwise.
pub fn sync_target(qnet: &mut QNet) {
    qnet.target = qnet.online.clone();
}

/// Greedy action from a Q-pair; ties break toward participation.
fn greedy(q: [f64; 2]) -> u8 {
    u8::from(q[1] >= q[0])
}

/// Epsilon-greedy joint action: per agent independently, a uniform random
/// action with probability `epsilon`, otherwise the argmax action.
pub fn act(
    states: &[AgentState],
    qnet: &QNet,
    epsilon: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidConfig("epsilon must be in [0, 1]".into()));
    }
    let mut actions = Vec::with_capacity(states.len());
    for s in states {
        let explore = rng.gen::<f64>() < epsilon;
        if explore {
            actions.push(rng.gen_range(0..2u8));
        } else {
            actions.push(greedy(qnet.q_pair(s)?));
        }
    }
    Ok(actions)
}

/// Slot with the largest Q(s, participate) - Q(s, terminate) gap; the
/// repair target when a joint action selects nobody.
pub fn best_gap_slot(states: &[AgentState], qnet: &QNet) -> Result<usize> {
    let mut best = 0;
    let mut best_gap = f64::NEG_INFINITY;
    for (i, s) in states.iter().enumerate() {
        let q = qnet.q_pair(s)?;
        let gap = q[1] - q[0];
        if gap > best_gap {
            best_gap = gap;
            best = i;
        }
    }
    Ok(best)
}

/// Joint action value: sum of each agent's chosen Q-value under the online
/// network.
pub fn q_tot(states: &[AgentState], actions: &[u8], qnet: &QNet) -> Result<f64> {
    if states.len() != actions.len() {
        return Err(Error::DimensionMismatch(
            "states/actions length mismatch".into(),
        ));
    }
    let refs: Vec<&AgentState> = states.iter().collect();
    let q = qnet.q_batch(&qnet.online, &refs)?;
    Ok(q.iter()
        .zip(actions)
        .map(|(pair, &a)| pair[a as usize])
        .sum())
}

/// VDN loss and its gradient with respect to the online parameters over a
/// batch of transitions:
/// `L = mean_b (y_b - Q_tot(s_b, a_b))^2` with
/// `y_b = r_b + gamma * sum_n max_a Q_target(s'_bn, a)` (`y_b = r_b` for
/// terminal transitions).
pub fn vdn_loss_grad(
    batch: &[&Transition],
    qnet: &QNet,
    gamma: f64,
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dim = qnet.spec.input_dim;
    // Flatten all current states into one forward/backward pass.
    let mut rows = 0usize;
    for tr in batch {
        if tr.states.len() != tr.actions.len() {
            return Err(Error::DimensionMismatch(
                "transition states/actions mismatch".into(),
            ));
        }
        rows += tr.states.len();
    }
    let mut inputs = Vec::with_capacity(rows * dim);
    for tr in batch {
        for s in &tr.states {
            inputs.extend_from_slice(&s.0);
        }
    }
    let logits = nn::forward_logits(&qnet.online, &qnet.spec, &inputs, rows)?;

    // TD targets from the frozen target network.
    let mut targets = Vec::with_capacity(batch.len());
    for tr in batch {
        let mut y = tr.reward;
        if !tr.terminal {
            let next_refs: Vec<&AgentState> = tr.next_states.iter().collect();
            let next_q = qnet.q_batch(&qnet.target, &next_refs)?;
            y += gamma * next_q.iter().map(|q| q[0].max(q[1])).sum::<f64>();
        }
        targets.push(y);
    }

    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; rows * 2];
    let mut row = 0usize;
    for (b, tr) in batch.iter().enumerate() {
        let mut tot = 0.0;
        for (n, &a) in tr.actions.iter().enumerate() {
            tot += logits[(row + n) * 2 + a as usize];
        }
        let err = targets[b] - tot;
        loss += err * err * inv_b;
        let d = -2.0 * err * inv_b;
        for (n, &a) in tr.actions.iter().enumerate() {
            dlogits[(row + n) * 2 + a as usize] += d;
        }
        row += tr.states.len();
    }
    let grad = nn::backward_from_logits_grad(&qnet.online, &qnet.spec, &inputs, rows, &dlogits)?;
    Ok((loss, grad))
}

/// One TD training step: samples a uniform minibatch, takes an SGD step on
/// the VDN loss, and returns the pre-step loss.
pub fn td_train_step(
    buffer: &ReplayBuffer,
    qnet: &mut QNet,
    gamma: f64,
    batch_size: usize,
    lr: f64,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    if buffer.len() < batch_size {
        return Err(Error::InsufficientBuffer {
            have: buffer.len(),
            need: batch_size,
        });
    }
    let batch: Vec<&Transition> = (0..batch_size)
        .map(|_| buffer.get(rng.gen_range(0..buffer.len())))
        .collect();
    let (loss, grad) = vdn_loss_grad(&batch, qnet, gamma)?;
    qnet.online = nn::sgd_step(&qnet.online, &grad, lr)?;
    Ok(loss)
}

/// MARL training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarlHyperparams {
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of episodes over which epsilon anneals linearly.
    pub eps_anneal_frac: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_sync_period: usize,
    pub warmup_transitions: usize,
    pub episodes: usize,
    pub steps_per_round: usize,
    pub hidden_dims: Vec<usize>,
    pub delta_t_p: usize,
    pub delta_t_c: usize,
}

impl Default for MarlHyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_frac: 0.6,
            buffer_capacity: 10_000,
            batch_size: 64,
            lr: 1e-3,
            target_sync_period: 50,
            warmup_transitions: 200,
            episodes: 150,
            steps_per_round: 1,
            hidden_dims: vec![256],
            delta_t_p: DELTA_T_P_DEFAULT,
            delta_t_c: DELTA_T_C_DEFAULT,
        }
    }
}

impl MarlHyperparams {
    pub fn epsilon_at(&self, episode: usize) -> f64 {
        if self.episodes == 0 {
            return self.eps_end;
        }
        let horizon = (self.episodes as f64 * self.eps_anneal_frac).max(1.0);
        let frac = episode as f64 / horizon;
        if frac >= 1.0 {
            return self.eps_end;
        }
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Episode-level rollout settings shared by training and evaluation.
#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    /// Clients sampled per round (N).
    pub n_sampled: usize,
    /// Rounds per episode (T).
    pub rounds: usize,
    pub weights: RewardWeights,
    pub variant: UtilityVariant,
}

/// Uniform sample of `n` distinct client ids, ascending.
pub fn sample_clients(n_clients: usize, n: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let ids: Vec<usize> = (0..n_clients).collect();
    let mut sampled: Vec<usize> = ids.choose_multiple(rng, n).copied().collect();
    sampled.sort_unstable();
    sampled
}

/// Result of MARL training.
pub struct TrainOutcome {
    pub qnet: QNet,
    pub normalizer: Normalizer,
    /// Total shaped reward per episode.
    pub episode_rewards: Vec<f64>,
}

/// Trains the VDN agents over full FL episodes. Each episode reinitializes
/// the task model, runs `cfg.rounds` rounds with epsilon-greedy actions,
/// stores one transition per round, and takes `steps_per_round` TD steps
/// per round once the warmup has filled the buffer. Returns the trained
/// network, the frozen normalizer, and the per-episode reward log.
pub fn train_marl(
    env: &FlEnv,
    cfg: &EpisodeConfig,
    hp: &MarlHyperparams,
    seed: u64,
) -> Result<TrainOutcome> {
    if cfg.n_sampled == 0 || cfg.n_sampled > env.n_clients() {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= n_sampled <= {} clients",
            env.n_clients()
        )));
    }
    let dim = state_dim(hp.delta_t_p, hp.delta_t_c);
    let spec = MlpSpec::new(dim, hp.hidden_dims.clone(), 2, Activation::Relu)?;
    let mut qnet = QNet::new(spec, rng::sub_seed(seed, "qnet-init", &[]));
    let mut normalizer = Normalizer::new(dim);
    let mut buffer = ReplayBuffer::new(hp.buffer_capacity);
    let mut act_rng = rng::stream(seed, "marl-act", &[]);
    let mut td_rng = rng::stream(seed, "marl-td", &[]);
    let mut train_steps = 0usize;
    let mut episode_rewards = Vec::with_capacity(hp.episodes);

    for ep in 0..hp.episodes {
        let epsilon = hp.epsilon_at(ep);
        let ep_master = rng::sub_seed(seed, "episode", &[ep as u64]);
        let total = run_training_episode(
            env,
            cfg,
            hp,
            ep_master,
            epsilon,
            &mut qnet,
            &mut normalizer,
            &mut buffer,
            &mut act_rng,
            &mut td_rng,
            &mut train_steps,
        )?;
        episode_rewards.push(total);
    }
    normalizer.freeze();
    Ok(TrainOutcome {
        qnet,
        normalizer,
        episode_rewards,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_training_episode(
    env: &FlEnv,
    cfg: &EpisodeConfig,
    hp: &MarlHyperparams,
    ep_master: u64,
    epsilon: f64,
    qnet: &mut QNet,
    normalizer: &mut Normalizer,
    buffer: &mut ReplayBuffer,
    act_rng: &mut ChaCha12Rng,
    td_rng: &mut ChaCha12Rng,
    train_steps: &mut usize,
) -> Result<f64> {
    let init = nn::init_params(&env.task_spec, rng::sub_seed(ep_master, "task-model", &[]));
    let acc0 = evaluate_accuracy(&init, &env.task_spec, &env.test_batch)?;
    let mut global = GlobalState::new(init, acc0);
    let mut collector = StatsCollector::new(env.n_clients(), hp.delta_t_p, hp.delta_t_c);
    let mut sample_rng = rng::stream(ep_master, "client-sample", &[]);
    let mut pending: Option<(Vec<AgentState>, Vec<u8>, f64)> = None;
    let mut total_reward = 0.0;

    for t in 1..=cfg.rounds {
        let sampled = sample_clients(env.n_clients(), cfg.n_sampled, &mut sample_rng);
        let probe = probing_phase(env, &global, &sampled, ep_master, t as u64)?;
        for (slot, &client) in sampled.iter().enumerate() {
            collector.record_probe(client, probe.draws[slot].probe);
        }
        let states: Vec<AgentState> = sampled
            .iter()
            .enumerate()
            .map(|(slot, &client)| {
                let obs = RawObservation {
                    probing_loss: probe.losses[slot],
                    probe_window: collector.probe_window(client),
                    upload_window: collector.upload_window(client),
                    comm_cost: comm_cost(&env.traces, &env.profiles[client]),
                    data_size: env.profiles[client].data_size as f64,
                };
                build_state(&obs, t, cfg.rounds, normalizer)
            })
            .collect::<Result<_>>()?;

        let mut mask = act(&states, qnet, epsilon, act_rng)?;
        if mask.iter().all(|&a| a == 0) {
            mask[best_gap_slot(&states, qnet)?] = 1;
        }

        let prev_acc = global.current_acc();
        let (next_global, mut record) =
            complete_and_aggregate(env, &global, &sampled, &mask, probe)?;
        for (slot, &client) in sampled.iter().enumerate() {
            if mask[slot] != 0 {
                collector.record_upload(client, record.upload_lat[slot]);
            }
        }
        let reward = round_reward(&record, prev_acc, &cfg.weights, cfg.variant)?;
        record.reward = reward;
        total_reward += reward;

        if let Some((ps, pa, pr)) = pending.take() {
            buffer.push(Transition {
                states: ps,
                actions: pa,
                reward: pr,
                next_states: states.clone(),
                terminal: false,
            });
        }
        pending = Some((states, mask, reward));
        global = next_global;

        if buffer.len() >= hp.warmup_transitions.max(hp.batch_size) {
            for _ in 0..hp.steps_per_round {
                td_train_step(buffer, qnet, hp.gamma, hp.batch_size, hp.lr, td_rng)?;
                *train_steps += 1;
                if *train_steps % hp.target_sync_period == 0 {
                    sync_target(qnet);
                }
            }
        }
    }
    if let Some((ps, pa, pr)) = pending.take() {
        let next = ps.clone();
        buffer.push(Transition {
            states: ps,
            actions: pa,
            reward: pr,
            next_states: next,
            terminal: true,
        });
    }
    Ok(total_reward)
}

/// Serialized trained policy: network parameters plus the sidecar needed to
/// rebuild states and act deterministically.
#[derive(Debug, Clone)]
pub struct PolicyArtifact {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub normalizer_mean: Vec<f64>,
    pub normalizer_std: Vec<f64>,
    pub delta_t_p: usize,
    pub delta_t_c: usize,
    pub hyperparams: MarlHyperparams,
    pub seed: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Sidecar {
    spec: MlpSpec,
    normalizer_mean: Vec<f64>,
    normalizer_std: Vec<f64>,
    delta_t_p: usize,
    delta_t_c: usize,
    hyperparams: MarlHyperparams,
    seed: u64,
}

impl PolicyArtifact {
    pub fn from_training(outcome: &TrainOutcome, hp: &MarlHyperparams, seed: u64) -> Self {
        Self {
            spec: outcome.qnet.spec.clone(),
            params: outcome.qnet.online.clone(),
            normalizer_mean: outcome.normalizer.mean().to_vec(),
            normalizer_std: outcome.normalizer.std(),
            delta_t_p: hp.delta_t_p,
            delta_t_c: hp.delta_t_c,
            hyperparams: hp.clone(),
            seed,
        }
    }

    pub fn qnet(&self) -> QNet {
        QNet::from_params(self.spec.clone(), self.params.clone())
    }

    pub fn normalizer(&self) -> Result<Normalizer> {
        Normalizer::from_stats(self.normalizer_mean.clone(), self.normalizer_std.clone())
    }

    /// Writes `<stem>.bin` (parameters) and `<stem>.json` (sidecar).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&bin)?);
        self.params.write_binary(&mut f)?;
        let sidecar = Sidecar {
            spec: self.spec.clone(),
            normalizer_mean: self.normalizer_mean.clone(),
            normalizer_std: self.normalizer_std.clone(),
            delta_t_p: self.delta_t_p,
            delta_t_c: self.delta_t_c,
            hyperparams: self.hyperparams.clone(),
            seed: self.seed,
        };
        std::fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        if !bin.exists() {
            return Err(Error::MissingArtifact(bin));
        }
        if !json.exists() {
            return Err(Error::MissingArtifact(json));
        }
        let mut f = std::io::BufReader::new(std::fs::File::open(&bin)?);
        let params = ParamVector::read_binary(&mut f)?;
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(&json)?)?;
        if params.layout() != &sidecar.spec.layout() {
            return Err(Error::LayoutMismatch(
                "policy parameters do not match the sidecar spec".into(),
            ));
        }
        Ok(Self {
            spec: sidecar.spec,
            params,
            normalizer_mean: sidecar.normalizer_mean,
            normalizer_std: sidecar.normalizer_std,
            delta_t_p: sidecar.delta_t_p,
            delta_t_c: sidecar.delta_t_c,
            hyperparams: sidecar.hyperparams,
            seed: sidecar.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_qnet(input: usize, hidden: usize, seed: u64) -> QNet {
        let spec = MlpSpec::new(input, vec![hidden], 2, Activation::Relu).unwrap();
        QNet::new(spec, seed)
    }

    fn rand_state(dim: usize, rng: &mut ChaCha12Rng) -> AgentState {
        AgentState((0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn normalizer_zscore_identity() {
        let mut n = Normalizer::new(1);
        for x in [1.0, 2.0, 3.0] {
            n.observe(&[x]);
        }
        // A value equal to the running mean normalizes to 0.
        let z = n.normalize(&[2.0]);
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn normalizer_zero_variance_guard() {
        let mut n = Normalizer::new(1);
        for _ in 0..10 {
            n.observe(&[4.2]);
        }
        let z = n.normalize(&[4.2]);
        assert_eq!(z[0], 0.0);
        assert!(z[0].is_finite());
    }

    #[test]
    fn normalizer_clamps_outliers() {
        let mut n = Normalizer::new(1);
        for x in [0.0, 1.0, 0.0, 1.0] {
            n.observe(&[x]);
        }
        let z = n.normalize(&[1e9]);
        assert_eq!(z[0], 5.0);
        let z = n.normalize(&[-1e9]);
        assert_eq!(z[0], -5.0);
    }

    #[test]
    fn frozen_normalizer_replays_identically() {
        let mut n = Normalizer::new(3);
        let mut r = rng::stream(1, "norm", &[]);
        let raws: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| r.gen_range(0.0..10.0)).collect())
            .collect();
        for raw in &raws {
            n.observe(raw);
        }
        n.freeze();
        let first: Vec<Vec<f64>> = raws.iter().map(|raw| n.normalize(raw)).collect();
        let second: Vec<Vec<f64>> = raws.iter().map(|raw| n.normalize(raw)).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn raw_state_layout_and_round_fraction() {
        let obs = RawObservation {
            probing_loss: 0.7,
            probe_window: vec![1.0, 2.0, 3.0],
            upload_window: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            comm_cost: 1.0,
            data_size: 40.0,
        };
        let raw = obs.assemble(10, 10);
        assert_eq!(raw.len(), 12);
        assert_eq!(raw[0], 0.7);
        assert_eq!(*raw.last().unwrap(), 1.0); // t = T
    }

    #[test]
    fn build_state_rejects_non_finite() {
        let obs = RawObservation {
            probing_loss: f64::NAN,
            probe_window: vec![1.0; 3],
            upload_window: vec![1.0; 5],
            comm_cost: 1.0,
            data_size: 40.0,
        };
        let mut n = Normalizer::new(12);
        assert!(matches!(
            build_state(&obs, 1, 10, &mut n),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn stats_collector_padding_rules() {
        let mut c = StatsCollector::new(2, 3, 5);
        // No observations: zeros.
        assert_eq!(c.probe_window(0), vec![0.0, 0.0, 0.0]);
        assert_eq!(c.upload_window(0), vec![0.0; 5]);
        // One observation: backfilled with the first observed value.
        c.record_probe(0, 1.5);
        assert_eq!(c.probe_window(0), vec![1.5, 1.5, 1.5]);
        // Rolling window keeps the newest entries.
        c.record_probe(0, 2.0);
        c.record_probe(0, 3.0);
        c.record_probe(0, 4.0);
        assert_eq!(c.probe_window(0), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn act_is_greedy_at_zero_epsilon() {
        let qnet = toy_qnet(3, 8, 1);
        let mut r = rng::stream(2, "act", &[]);
        let s = rand_state(3, &mut r);
        let q = qnet.q_pair(&s).unwrap();
        let a = act(std::slice::from_ref(&s), &qnet, 0.0, &mut r).unwrap();
        assert_eq!(a[0], u8::from(q[1] >= q[0]));
    }

    #[test]
    fn act_ties_break_toward_participation() {
        // Zero parameters give Q = (0, 0) for any state.
        let spec = MlpSpec::new(3, vec![4], 2, Activation::Relu).unwrap();
        let qnet = QNet::from_params(spec.clone(), ParamVector::zeros(spec.layout()));
        let mut r = rng::stream(3, "tie", &[]);
        let s = rand_state(3, &mut r);
        let a = act(&[s], &qnet, 0.0, &mut r).unwrap();
        assert_eq!(a[0], 1);
    }

    #[test]
    fn act_uniform_at_full_epsilon() {
        let qnet = toy_qnet(3, 8, 4);
        let mut r = rng::stream(5, "explore", &[]);
        let s = rand_state(3, &mut r);
        let n = 10_000;
        let mut ones = 0usize;
        for _ in 0..n {
            ones += act(std::slice::from_ref(&s), &qnet, 1.0, &mut r).unwrap()[0] as usize;
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "action-1 frequency {freq}");
    }

    #[test]
    fn argmax_invariant_under_constant_shift() {
        // Adding a constant to both outputs (via the output biases) never
        // changes the greedy action.
        let mut qnet = toy_qnet(4, 6, 7);
        let mut r = rng::stream(8, "shift", &[]);
        for _ in 0..50 {
            let s = rand_state(4, &mut r);
            let before = greedy(qnet.q_pair(&s).unwrap());
            let n = qnet.online.len();
            let c = r.gen_range(-3.0..3.0);
            let mut shifted = qnet.online.clone();
            shifted.values_mut()[n - 2] += c;
            shifted.values_mut()[n - 1] += c;
            let saved = std::mem::replace(&mut qnet.online, shifted);
            let after = greedy(qnet.q_pair(&s).unwrap());
            qnet.online = saved;
            assert_eq!(before, after);
        }
    }

    #[test]
    fn q_tot_sums_and_is_permutation_invariant() {
        let qnet = toy_qnet(3, 8, 9);
        let mut r = rng::stream(10, "qtot", &[]);
        let states: Vec<AgentState> = (0..4).map(|_| rand_state(3, &mut r)).collect();
        let actions = vec![1, 0, 1, 1];
        let total = q_tot(&states, &actions, &qnet).unwrap();
        let by_hand: f64 = states
            .iter()
            .zip(&actions)
            .map(|(s, &a)| qnet.q_pair(s).unwrap()[a as usize])
            .sum();
        assert!((total - by_hand).abs() < 1e-12);
        // Permute agents together with their actions.
        let perm = [2usize, 0, 3, 1];
        let p_states: Vec<AgentState> = perm.iter().map(|&i| states[i].clone()).collect();
        let p_actions: Vec<u8> = perm.iter().map(|&i| actions[i]).collect();
        let permuted = q_tot(&p_states, &p_actions, &qnet).unwrap();
        assert!((total - permuted).abs() < 1e-12);
        // Single agent: q_tot is that agent's chosen Q.
        let single = q_tot(&states[..1], &actions[..1], &qnet).unwrap();
        assert!((single - qnet.q_pair(&states[0]).unwrap()[1]).abs() < 1e-12);
    }

    #[test]
    fn replay_buffer_fifo_eviction() {
        let mut buf = ReplayBuffer::new(5);
        let mk = |r: f64| Transition {
            states: vec![AgentState(vec![0.0])],
            actions: vec![1],
            reward: r,
            next_states: vec![AgentState(vec![0.0])],
            terminal: false,
        };
        for i in 0..8 {
            buf.push(mk(i as f64));
        }
        assert_eq!(buf.len(), 5);
        assert_eq!(buf.inserted(), 8);
        // Oldest three are gone.
        let rewards: Vec<f64> = (0..buf.len()).map(|i| buf.get(i).reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn terminal_fixed_point_has_zero_loss() {
        // Target y = r for a terminal transition; craft a reward equal to
        // the network's own q_tot so the loss vanishes.
        let qnet = toy_qnet(3, 8, 11);
        let mut r = rng::stream(12, "fix", &[]);
        let states: Vec<AgentState> = (0..2).map(|_| rand_state(3, &mut r)).collect();
        let actions = vec![1, 0];
        let reward = q_tot(&states, &actions, &qnet).unwrap();
        let tr = Transition {
            states,
            actions,
            reward,
            next_states: vec![],
            terminal: true,
        };
        let (loss, _) = vdn_loss_grad(&[&tr], &qnet, 0.99).unwrap();
        assert!(loss.abs() < 1e-20, "loss {loss}");
    }

    #[test]
    fn gamma_zero_reduces_target_to_reward() {
        let qnet = toy_qnet(3, 8, 13);
        let mut r = rng::stream(14, "g0", &[]);
        let states: Vec<AgentState> = (0..2).map(|_| rand_state(3, &mut r)).collect();
        let next_states: Vec<AgentState> = (0..2).map(|_| rand_state(3, &mut r)).collect();
        let actions = vec![0, 1];
        let reward = 0.37;
        let non_terminal = Transition {
            states: states.clone(),
            actions: actions.clone(),
            reward,
            next_states,
            terminal: false,
        };
        let terminal = Transition {
            states,
            actions,
            reward,
            next_states: vec![],
            terminal: true,
        };
        let (l1, g1) = vdn_loss_grad(&[&non_terminal], &qnet, 0.0).unwrap();
        let (l2, g2) = vdn_loss_grad(&[&terminal], &qnet, 0.0).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn td_seed_step(qnet: &mut QNet, rng: &mut ChaCha12Rng) -> f64 {
        let mut buf = ReplayBuffer::new(16);
        for _ in 0..8 {
            buf.push(Transition {
                states: vec![rand_state(3, rng)],
                actions: vec![rng.gen_range(0..2u8)],
                reward: rng.gen_range(-1.0..1.0),
                next_states: vec![rand_state(3, rng)],
                terminal: false,
            });
        }
        td_train_step(&buf, qnet, 0.9, 4, 1e-2, rng).unwrap()
    }

    #[test]
    fn vdn_gradient_matches_finite_differences() {
        let mut qnet = toy_qnet(3, 4, 15);
        let mut r = rng::stream(16, "vdn-fd", &[]);
        // Make the target differ from the online net so the TD target is
        // nontrivial.
        let _ = td_seed_step(&mut qnet, &mut r);
        let transitions: Vec<Transition> = (0..6)
            .map(|i| Transition {
                states: (0..2).map(|_| rand_state(3, &mut r)).collect(),
                actions: vec![r.gen_range(0..2u8), r.gen_range(0..2u8)],
                reward: r.gen_range(-2.0..2.0),
                next_states: (0..2).map(|_| rand_state(3, &mut r)).collect(),
                terminal: i % 3 == 0,
            })
            .collect();
        let refs: Vec<&Transition> = transitions.iter().collect();
        let (_, grad) = vdn_loss_grad(&refs, &qnet, 0.9).unwrap();
        let step = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..qnet.online.len() {
            let orig = qnet.online.values()[i];
            qnet.online.values_mut()[i] = orig + step;
            let (lp, _) = vdn_loss_grad(&refs, &qnet, 0.9).unwrap();
            qnet.online.values_mut()[i] = orig - step;
            let (lm, _) = vdn_loss_grad(&refs, &qnet, 0.9).unwrap();
            qnet.online.values_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * step);
            let analytic = grad.values()[i];
            let scale = analytic.abs().max(numeric.abs());
            let err = if scale < 1e-7 {
                (analytic - numeric).abs()
            } else {
                (analytic - numeric).abs() / scale
            };
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn td_step_requires_enough_transitions() {
        let mut qnet = toy_qnet(3, 4, 17);
        let buf = ReplayBuffer::new(16);
        let mut r = rng::stream(18, "td", &[]);
        assert!(matches!(
            td_train_step(&buf, &mut qnet, 0.9, 4, 1e-2, &mut r),
            Err(Error::InsufficientBuffer { .. })
        ));
    }

    #[test]
    fn sync_target_copies_bitwise_and_is_idempotent() {
        let mut qnet = toy_qnet(3, 8, 19);
        // Fresh network: target equals the initial online weights.
        assert_eq!(qnet.online.values(), qnet.target.values());
        let mut r = rng::stream(20, "sync", &[]);
        let _ = td_seed_step(&mut qnet, &mut r);
        assert_ne!(qnet.online.values(), qnet.target.values());
        sync_target(&mut qnet);
        assert_eq!(qnet.online.values(), qnet.target.values());
        let snapshot = qnet.target.clone();
        sync_target(&mut qnet);
        assert_eq!(qnet.target.values(), snapshot.values());
    }

    #[test]
    fn epsilon_schedule_anneals_linearly() {
        let hp = MarlHyperparams {
            episodes: 100,
            ..Default::default()
        };
        assert_eq!(hp.epsilon_at(0), 1.0);
        assert!((hp.epsilon_at(30) - 0.525).abs() < 1e-12);
        assert!((hp.epsilon_at(60) - 0.05).abs() < 1e-12);
        assert_eq!(hp.epsilon_at(99), 0.05);
    }

    #[test]
    fn artifact_roundtrip_preserves_policy() {
        let dir = tempfile::tempdir().unwrap();
        let qnet = toy_qnet(12, 16, 21);
        let outcome = TrainOutcome {
            qnet: qnet.clone(),
            normalizer: {
                let mut n = Normalizer::new(12);
                let mut r = rng::stream(22, "art", &[]);
                for _ in 0..20 {
                    let raw: Vec<f64> = (0..12).map(|_| r.gen_range(0.0..5.0)).collect();
                    n.observe(&raw);
                }
                n.freeze();
                n
            },
            episode_rewards: vec![],
        };
        let hp = MarlHyperparams::default();
        let artifact = PolicyArtifact::from_training(&outcome, &hp, 7);
        let stem = dir.path().join("policy");
        artifact.save(&stem).unwrap();
        let loaded = PolicyArtifact::load(&stem).unwrap();
        assert_eq!(loaded.params.values(), artifact.params.values());
        assert_eq!(loaded.delta_t_p, 3);
        assert_eq!(loaded.delta_t_c, 5);
        // Reloaded policy acts identically.
        let mut r = rng::stream(23, "art2", &[]);
        let s = rand_state(12, &mut r);
        let q1 = qnet.q_pair(&s).unwrap();
        let q2 = loaded.qnet().q_pair(&s).unwrap();
        assert_eq!(q1[0].to_bits(), q2[0].to_bits());
        assert_eq!(q1[1].to_bits(), q2[1].to_bits());
        // Normalizer stats replay identically.
        let n = loaded.normalizer().unwrap();
        let raw: Vec<f64> = (0..12).map(|_| 2.5).collect();
        assert_eq!(n.normalize(&raw), outcome.normalizer.normalize(&raw));
    }

    #[test]
    fn missing_artifact_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        assert!(matches!(
            PolicyArtifact::load(&missing),
            Err(Error::MissingArtifact(_))
        ));
    }
}
