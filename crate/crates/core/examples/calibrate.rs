// Scratch calibration probe for the desk-scale acceptance runs.

use fedsim::analysis::report;
use fedsim::config::ExperimentConfig;
use fedsim::experiment::{cmd_gen, load_env, run_policy_seeds};
use fedsim::marl::{train_marl, EpisodeConfig, PolicyArtifact};
use fedsim::policies::SelectionPolicy;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::default();
    let dir = std::path::PathBuf::from("/tmp/calib");
    let _ = std::fs::remove_dir_all(&dir);
    cmd_gen(&cfg, &dir).unwrap();
    let env = load_env(&cfg, &dir).unwrap();
    println!("gen+load: {:.1?}", t0.elapsed());

    let ep = EpisodeConfig {
        n_sampled: cfg.fl.sampled_per_round,
        rounds: cfg.fl.rounds,
        weights: cfg.reward.weights(),
        variant: cfg.reward.utility,
    };

    // Baseline snapshot.
    let seeds: Vec<u64> = (0..20).collect();
    let t1 = Instant::now();
    let mut runs = Vec::new();
    for (name, pol) in [
        ("select_all", SelectionPolicy::SelectAll),
        ("random_drop", SelectionPolicy::RandomDrop { p: 0.5 }),
        ("top_half_speed", SelectionPolicy::TopHalfSpeed),
        (
            "probing_loss_reject",
            SelectionPolicy::ProbingLossReject { strict_half: false },
        ),
    ] {
        let r = run_policy_seeds(&env, &pol, &ep, &cfg, &seeds).unwrap();
        runs.push((name.to_string(), r));
    }
    println!("baseline evals: {:.1?}", t1.elapsed());

    // Train MARL.
    let t2 = Instant::now();
    let outcome = train_marl(&env, &ep, &cfg.marl, cfg.sub_seed("marl", &[])).unwrap();
    println!(
        "train {} episodes: {:.1?}",
        cfg.marl.episodes,
        t2.elapsed()
    );
    let n_ep = outcome.episode_rewards.len();
    let head: f64 = outcome.episode_rewards[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = outcome.episode_rewards[n_ep - 20..].iter().sum::<f64>() / 20.0;
    println!("episode reward: first20 {head:.2} last20 {tail:.2}");

    let artifact = PolicyArtifact::from_training(&outcome, &cfg.marl, 0);
    let fed = SelectionPolicy::FedMarl { artifact };
    let fed_runs = run_policy_seeds(&env, &fed, &ep, &cfg, &seeds).unwrap();
    // Selection stats.
    let mut sel = 0usize;
    let mut tot = 0usize;
    for run in &fed_runs {
        for r in run {
            sel += r.mask.iter().filter(|&&a| a == 1).count();
            tot += r.mask.len();
        }
    }
    println!(
        "fedmarl selects {:.2} of {} per round",
        sel as f64 / (fed_runs.len() * ep.rounds) as f64,
        ep.n_sampled
    );
    runs.push(("fedmarl".to_string(), fed_runs));

    let rows = report(&runs).unwrap();
    println!("\npolicy                 acc_mean acc_std  sumH    sumB   reward_mean reward_std  normH  normB");
    for r in &rows {
        println!(
            "{:22} {:.4}  {:.4}  {:7.2} {:6.2} {:10.3} {:9.3}  {:.3}  {:.3}",
            r.policy,
            r.acc_mean,
            r.acc_std,
            r.sum_h_mean,
            r.sum_b_mean,
            r.reward_mean,
            r.reward_std,
            r.norm_latency.unwrap_or(f64::NAN),
            r.norm_comm.unwrap_or(f64::NAN)
        );
    }
    println!("\ntotal: {:.1?}", t0.elapsed());
}
