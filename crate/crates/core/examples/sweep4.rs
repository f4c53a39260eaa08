// Sweep task parameters for the probing-loss-rejection vs random-drop gap.

use fedsim::config::ExperimentConfig;
use fedsim::experiment::{cmd_gen, load_env, run_policy_seeds};
use fedsim::marl::EpisodeConfig;
use fedsim::policies::SelectionPolicy;

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn main() {
    let seeds: Vec<u64> = (0..20).collect();
    println!("M  dim lr    bs  acc(rd)        acc(plr)       gap     gap/se");
    for (classes, dim, lr, batch, hidden, npc) in [
        (4usize, 16usize, 0.5f64, 10usize, 32usize, 2000usize),
        (4, 16, 0.5, 5, 32, 2000),
        (4, 8, 0.5, 10, 32, 2000),
        (4, 8, 0.5, 5, 32, 2000),
        (4, 16, 0.4, 10, 32, 2000),
        (4, 16, 0.6, 10, 32, 2000),
        (4, 16, 0.5, 10, 16, 2000),
        (4, 8, 0.6, 10, 16, 2000),
        (3, 8, 0.5, 10, 16, 2000),
        (4, 8, 0.4, 10, 16, 2000),
    ] {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.classes = classes;
        cfg.dataset.dim = dim;
        cfg.dataset.n_per_class = npc;
        cfg.fl.lr = lr;
        cfg.fl.batch_size = batch;
        cfg.fl.hidden_dims = vec![hidden];
        let dir = std::path::PathBuf::from(format!(
            "/tmp/sweep_{classes}_{dim}_{lr}_{batch}_{hidden}_{npc}"
        ));
        let _ = std::fs::remove_dir_all(&dir);
        cmd_gen(&cfg, &dir).unwrap();
        let env = load_env(&cfg, &dir).unwrap();
        let ep = EpisodeConfig {
            n_sampled: cfg.fl.sampled_per_round,
            rounds: cfg.fl.rounds,
            weights: cfg.reward.weights(),
            variant: cfg.reward.utility,
        };
        let rd = run_policy_seeds(
            &env,
            &SelectionPolicy::RandomDrop { p: 0.5 },
            &ep,
            &cfg,
            &seeds,
        )
        .unwrap();
        let plr = run_policy_seeds(
            &env,
            &SelectionPolicy::ProbingLossReject { strict_half: false },
            &ep,
            &cfg,
            &seeds,
        )
        .unwrap();
        let rd_acc: Vec<f64> = rd.iter().map(|r| r.last().unwrap().acc).collect();
        let plr_acc: Vec<f64> = plr.iter().map(|r| r.last().unwrap().acc).collect();
        let (m_rd, se_rd) = mean_se(&rd_acc);
        let (m_plr, se_plr) = mean_se(&plr_acc);
        let gap = m_plr - m_rd;
        let se = (se_rd * se_rd + se_plr * se_plr).sqrt();
        println!(
            "{classes:2} {dim:3} {lr:5.2} {batch:3} h{hidden:3} {m_rd:.4}+-{se_rd:.4}  {m_plr:.4}+-{se_plr:.4}  {gap:+.4}  {:+.2}",
            gap / se
        );
    }
}
