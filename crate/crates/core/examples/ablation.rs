// Ablation probe: retrain with heavier latency/comm weights and compare.

use fedsim::analysis::RewardWeights;
use fedsim::config::ExperimentConfig;
use fedsim::experiment::{cmd_gen, load_env, run_policy_seeds};
use fedsim::marl::{train_marl, EpisodeConfig, PolicyArtifact};
use fedsim::policies::SelectionPolicy;

fn stats(runs: &[Vec<fedsim::engine::RoundRecord>]) -> (f64, f64, f64, f64, f64) {
    let n = runs.len() as f64;
    let acc = runs.iter().map(|r| r.last().unwrap().acc).sum::<f64>() / n;
    let sum_h = runs
        .iter()
        .map(|r| r.iter().map(|x| x.h_t).sum::<f64>())
        .sum::<f64>()
        / n;
    let sum_b = runs
        .iter()
        .map(|r| r.iter().map(|x| x.b_t).sum::<f64>())
        .sum::<f64>()
        / n;
    let reward = runs
        .iter()
        .map(|r| r.iter().map(|x| x.reward).sum::<f64>())
        .sum::<f64>()
        / n;
    let sel = runs
        .iter()
        .flat_map(|r| r.iter())
        .map(|x| x.mask.iter().filter(|&&a| a == 1).count() as f64)
        .sum::<f64>()
        / runs.iter().map(|r| r.len()).sum::<usize>() as f64;
    (acc, sum_h, sum_b, reward, sel)
}

fn main() {
    let cfg = ExperimentConfig::default();
    let dir = std::path::PathBuf::from("/tmp/ablate");
    let _ = std::fs::remove_dir_all(&dir);
    cmd_gen(&cfg, &dir).unwrap();
    let env = load_env(&cfg, &dir).unwrap();
    let seeds: Vec<u64> = (0..20).collect();

    let eval_ep = EpisodeConfig {
        n_sampled: cfg.fl.sampled_per_round,
        rounds: cfg.fl.rounds,
        weights: cfg.reward.weights(),
        variant: cfg.reward.utility,
    };

    for (label, w) in [
        ("default (1.0,0.2,0.1)", RewardWeights::new(1.0, 0.2, 0.1).unwrap()),
        ("ablation (1.0,0.5,0.3)", RewardWeights::new(1.0, 0.5, 0.3).unwrap()),
    ] {
        let train_ep = EpisodeConfig {
            weights: w,
            ..eval_ep.clone()
        };
        let outcome = train_marl(&env, &train_ep, &cfg.marl, cfg.sub_seed("marl", &[])).unwrap();
        let artifact = PolicyArtifact::from_training(&outcome, &cfg.marl, 0);
        let runs = run_policy_seeds(
            &env,
            &SelectionPolicy::FedMarl { artifact },
            &eval_ep,
            &cfg,
            &seeds,
        )
        .unwrap();
        let (acc, h, b, r, sel) = stats(&runs);
        println!("{label}: acc {acc:.4} sumH {h:.2} sumB {b:.2} reward {r:.2} sel/round {sel:.2}");
    }

    // Latency floor oracle: always select exactly the client with the
    // smallest expected rest+upload (cheating on cell means).
    let mut floor_h = 0.0;
    for &seed in &seeds {
        let master = cfg.sub_seed("eval", &[seed]);
        let runs =
            run_policy_seeds(&env, &SelectionPolicy::TopHalfSpeed, &eval_ep, &cfg, &[seed]).unwrap();
        let _ = (master, runs);
    }
    let _ = floor_h;
    floor_h += 0.0;
}
