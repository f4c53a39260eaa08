//! End-to-end experiment pipeline: artifact generation, MARL training,
//! policy evaluation and comparison, all reproducible from one config and
//! one master seed.
//!
//! Artifacts live in one output directory:
//!
//! ```text
//! out/
//!   config.toml          resolved configuration
//!   train.csv, test.csv  generated dataset (train pool / held-out test)
//!   shards.jsonl         per-client shard plan
//!   profiles.jsonl       per-client device/location assignments
//!   traces.csv           latency trace table
//!   policy.bin/.json     trained MARL policy
//!   train_log.csv        per-episode training reward
//!   runs/<policy>_seed<k>.jsonl
//!   summary_<policy>.csv
//!   comparison.csv
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::analysis::{report, round_reward, summary_to_csv, SummaryRow};
use crate::config::ExperimentConfig;
use crate::data::{
    gen_dataset, partition_noniid, read_dataset_csv, read_shards_jsonl, split_holdout,
    write_dataset_csv, write_shards_jsonl,
};
use crate::engine::{
    complete_and_aggregate, evaluate_accuracy, probing_phase, write_records_jsonl, FlEnv,
    FlParams, GlobalState, RoundRecord,
};
use crate::marl::{
    build_state, sample_clients, train_marl, AgentState, EpisodeConfig, Normalizer,
    PolicyArtifact, QNet, RawObservation, StatsCollector, TrainOutcome,
};
use crate::nn::{self, Activation, MlpSpec};
use crate::policies::{decide, RoundContext, SelectionPolicy};
use crate::traces::{
    assign_profiles, comm_cost, gen_synthetic_traces, read_profiles_jsonl, read_trace_csv,
    write_profiles_jsonl, write_trace_csv,
};
use crate::{rng, Error, Result};

/// Paths written by [`cmd_gen`].
#[derive(Debug, Clone)]
pub struct GenPaths {
    pub config: PathBuf,
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
    pub shards_jsonl: PathBuf,
    pub profiles_jsonl: PathBuf,
    pub traces_csv: PathBuf,
}

impl GenPaths {
    fn of(out: &Path) -> Self {
        Self {
            config: out.join("config.toml"),
            train_csv: out.join("train.csv"),
            test_csv: out.join("test.csv"),
            shards_jsonl: out.join("shards.jsonl"),
            profiles_jsonl: out.join("profiles.jsonl"),
            traces_csv: out.join("traces.csv"),
        }
    }

    pub fn all(&self) -> [&PathBuf; 6] {
        [
            &self.config,
            &self.train_csv,
            &self.test_csv,
            &self.shards_jsonl,
            &self.profiles_jsonl,
            &self.traces_csv,
        ]
    }
}

/// Generates dataset, shard plan, client profiles and latency traces,
/// deterministically from the master seed.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<GenPaths> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let paths = GenPaths::of(out);

    let ds = gen_dataset(
        cfg.dataset.classes,
        cfg.dataset.dim,
        cfg.dataset.n_per_class,
        cfg.sub_seed("dataset", &[]),
    )?;
    let (train, test) = split_holdout(&ds, cfg.dataset.test_frac, cfg.sub_seed("holdout", &[]))?;
    let plan = partition_noniid(
        &train,
        cfg.partition.clients,
        cfg.partition.alpha,
        cfg.partition.min_size,
        cfg.partition.max_size,
        cfg.sub_seed("partition", &[]),
    )?;
    let traces = gen_synthetic_traces(&cfg.traces, cfg.sub_seed("traces", &[]))?;
    let profiles = assign_profiles(
        &plan.sizes,
        cfg.traces.device_bases.len(),
        cfg.traces.locations.len(),
        cfg.sub_seed("profiles", &[]),
    );

    cfg.save(&paths.config)?;
    write_dataset_csv(&train, &paths.train_csv)?;
    write_dataset_csv(&test, &paths.test_csv)?;
    write_shards_jsonl(&plan, &paths.shards_jsonl)?;
    write_profiles_jsonl(&profiles, &paths.profiles_jsonl)?;
    write_trace_csv(&traces, &paths.traces_csv)?;
    Ok(paths)
}

/// Loads the generated artifacts back into an in-memory environment.
pub fn load_env(cfg: &ExperimentConfig, out: &Path) -> Result<FlEnv> {
    cfg.validate()?;
    let paths = GenPaths::of(out);
    for p in [&paths.train_csv, &paths.test_csv, &paths.shards_jsonl, &paths.profiles_jsonl, &paths.traces_csv] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let train = read_dataset_csv(&paths.train_csv, cfg.dataset.classes)?;
    let test = read_dataset_csv(&paths.test_csv, cfg.dataset.classes)?;
    let plan = read_shards_jsonl(&paths.shards_jsonl)?;
    let profiles = read_profiles_jsonl(&paths.profiles_jsonl)?;
    let traces = read_trace_csv(&paths.traces_csv, cfg.traces.comm_costs.clone())?;
    if profiles.len() != plan.n_clients() {
        return Err(Error::InvalidConfig(format!(
            "{} profiles for {} shards",
            profiles.len(),
            plan.n_clients()
        )));
    }
    let client_batches = plan
        .shards
        .iter()
        .map(|shard| train.batch_of(shard))
        .collect::<Result<_>>()?;
    let task_spec = MlpSpec::new(
        cfg.dataset.dim,
        cfg.fl.hidden_dims.clone(),
        cfg.dataset.classes,
        Activation::Relu,
    )?;
    Ok(FlEnv {
        task_spec,
        client_batches,
        test_batch: test.as_batch()?,
        profiles,
        traces,
        fl: FlParams {
            lr: cfg.fl.lr,
            batch_size: cfg.fl.batch_size,
            post_probe_epochs: cfg.fl.post_probe_epochs,
        },
    })
}

fn episode_config(cfg: &ExperimentConfig) -> EpisodeConfig {
    EpisodeConfig {
        n_sampled: cfg.fl.sampled_per_round,
        rounds: cfg.fl.rounds,
        weights: cfg.reward.weights(),
        variant: cfg.reward.utility,
    }
}

/// Paths written by [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainPaths {
    /// Policy artifact stem; `.bin` and `.json` are appended.
    pub policy_stem: PathBuf,
    pub train_log: PathBuf,
}

/// Trains the MARL policy on the generated environment and writes the
/// policy artifact plus the per-episode reward log.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainPaths> {
    let env = load_env(cfg, out)?;
    let ep = episode_config(cfg);
    let seed = cfg.sub_seed("marl", &[]);
    let outcome: TrainOutcome = train_marl(&env, &ep, &cfg.marl, seed)?;
    let artifact = PolicyArtifact::from_training(&outcome, &cfg.marl, seed);
    let stem = out.join("policy");
    artifact.save(&stem)?;
    let log = out.join("train_log.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&log)?);
    writeln!(f, "episode,total_reward")?;
    for (i, r) in outcome.episode_rewards.iter().enumerate() {
        writeln!(f, "{i},{r}")?;
    }
    Ok(TrainPaths {
        policy_stem: stem,
        train_log: log,
    })
}

/// Resolves a policy by name; `fedmarl` loads the trained artifact from the
/// output directory.
pub fn resolve_policy(cfg: &ExperimentConfig, out: &Path, name: &str) -> Result<SelectionPolicy> {
    match name {
        "select_all" => Ok(SelectionPolicy::SelectAll),
        "random_drop" => Ok(SelectionPolicy::RandomDrop { p: cfg.policy.drop_p }),
        "top_half_speed" => Ok(SelectionPolicy::TopHalfSpeed),
        "probing_loss_reject" => Ok(SelectionPolicy::ProbingLossReject {
            strict_half: cfg.policy.strict_half,
        }),
        "fedmarl" => {
            let artifact = PolicyArtifact::load(&out.join("policy"))?;
            if artifact.delta_t_p != cfg.marl.delta_t_p || artifact.delta_t_c != cfg.marl.delta_t_c
            {
                return Err(Error::InvalidConfig(format!(
                    "policy artifact windows ({}, {}) do not match config ({}, {})",
                    artifact.delta_t_p,
                    artifact.delta_t_c,
                    cfg.marl.delta_t_p,
                    cfg.marl.delta_t_c
                )));
            }
            Ok(SelectionPolicy::FedMarl { artifact })
        }
        other => Err(Error::UnknownPolicy(other.to_string())),
    }
}

/// Runs one evaluation episode under a fixed policy and returns the round
/// records, rewards filled in. All randomness derives from `master`, with
/// per-`(round, client)` streams, so different policies under the same seed
/// face identical client samples and latency draws.
pub fn run_policy_episode(
    env: &FlEnv,
    policy: &SelectionPolicy,
    ep: &EpisodeConfig,
    master: u64,
) -> Result<Vec<RoundRecord>> {
    let init = nn::init_params(&env.task_spec, rng::sub_seed(master, "task-model", &[]));
    let acc0 = evaluate_accuracy(&init, &env.task_spec, &env.test_batch)?;
    let mut global = GlobalState::new(init, acc0);
    let mut sample_rng = rng::stream(master, "client-sample", &[]);
    let mut records = Vec::with_capacity(ep.rounds);

    // MARL inference state: frozen normalizer plus history windows.
    let marl_ctx: Option<(QNet, Normalizer)> = match policy {
        SelectionPolicy::FedMarl { artifact } => {
            Some((artifact.qnet(), artifact.normalizer()?))
        }
        _ => None,
    };
    let (delta_t_p, delta_t_c) = match policy {
        SelectionPolicy::FedMarl { artifact } => (artifact.delta_t_p, artifact.delta_t_c),
        _ => (crate::marl::DELTA_T_P_DEFAULT, crate::marl::DELTA_T_C_DEFAULT),
    };
    let mut collector = StatsCollector::new(env.n_clients(), delta_t_p, delta_t_c);

    for t in 1..=ep.rounds {
        let sampled = sample_clients(env.n_clients(), ep.n_sampled, &mut sample_rng);
        let probe = probing_phase(env, &global, &sampled, master, t as u64)?;
        for (slot, &client) in sampled.iter().enumerate() {
            collector.record_probe(client, probe.draws[slot].probe);
        }
        let states: Option<Vec<AgentState>> = match &marl_ctx {
            Some((_, normalizer)) => {
                let mut frozen = normalizer.clone();
                Some(
                    sampled
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
                            build_state(&obs, t, ep.rounds, &mut frozen)
                        })
                        .collect::<Result<_>>()?,
                )
            }
            None => None,
        };
        let mut policy_rng = rng::stream(master, "policy", &[t as u64]);
        let probe_lat = probe.probe_latencies();
        let ctx = RoundContext {
            probe_losses: &probe.losses,
            probe_lat: &probe_lat,
            states: states.as_deref(),
        };
        let mask = decide(policy, &ctx, &mut policy_rng)?;

        let prev_acc = global.current_acc();
        let (next_global, mut record) = complete_and_aggregate(env, &global, &sampled, &mask, probe)?;
        for (slot, &client) in sampled.iter().enumerate() {
            if mask[slot] != 0 {
                collector.record_upload(client, record.upload_lat[slot]);
            }
        }
        record.reward = round_reward(&record, prev_acc, &ep.weights, ep.variant)?;
        records.push(record);
        global = next_global;
    }
    Ok(records)
}

/// Evaluates a policy over several seeds in parallel; results are ordered
/// by seed.
pub fn run_policy_seeds(
    env: &FlEnv,
    policy: &SelectionPolicy,
    ep: &EpisodeConfig,
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<Vec<Vec<RoundRecord>>> {
    seeds
        .par_iter()
        .map(|&seed| run_policy_episode(env, policy, ep, cfg.sub_seed("eval", &[seed])))
        .collect()
}

/// Paths written by [`cmd_run`].
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub records: Vec<PathBuf>,
    pub summary: PathBuf,
}

/// Runs a named policy over the given seeds: one JSONL of round records per
/// seed plus a summary CSV.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    out: &Path,
    policy_name: &str,
    seeds: &[u64],
) -> Result<RunPaths> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed".into()));
    }
    let env = load_env(cfg, out)?;
    let policy = resolve_policy(cfg, out, policy_name)?;
    let ep = episode_config(cfg);
    let runs = run_policy_seeds(&env, &policy, &ep, cfg, seeds)?;

    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    let mut record_paths = Vec::with_capacity(seeds.len());
    for (seed, records) in seeds.iter().zip(&runs) {
        let path = runs_dir.join(format!("{policy_name}_seed{seed}.jsonl"));
        write_records_jsonl(records, &path)?;
        record_paths.push(path);
    }
    let rows = report(&[(policy_name.to_string(), runs)])?;
    let summary = out.join(format!("summary_{policy_name}.csv"));
    std::fs::write(&summary, summary_to_csv(&rows))?;
    Ok(RunPaths {
        records: record_paths,
        summary,
    })
}

/// Runs several policies over the same seeds and merges their summaries
/// into one comparison CSV (normalized against the `fedmarl` row when
/// present).
pub fn cmd_compare(
    cfg: &ExperimentConfig,
    out: &Path,
    policy_names: &[String],
    seeds: &[u64],
) -> Result<PathBuf> {
    if policy_names.is_empty() {
        return Err(Error::InvalidConfig("need at least one policy".into()));
    }
    let env = load_env(cfg, out)?;
    let ep = episode_config(cfg);
    let mut all_runs: Vec<(String, Vec<Vec<RoundRecord>>)> = Vec::new();
    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    for name in policy_names {
        let policy = resolve_policy(cfg, out, name)?;
        let runs = run_policy_seeds(&env, &policy, &ep, cfg, seeds)?;
        for (seed, records) in seeds.iter().zip(&runs) {
            write_records_jsonl(records, &runs_dir.join(format!("{name}_seed{seed}.jsonl")))?;
        }
        all_runs.push((name.clone(), runs));
    }
    let rows: Vec<SummaryRow> = report(&all_runs)?;
    let path = out.join("comparison.csv");
    std::fs::write(&path, summary_to_csv(&rows))?;
    Ok(path)
}
