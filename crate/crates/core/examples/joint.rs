// Joint calibration: criterion-4 gap and criterion-6 ratios per task config.

use fedsim::analysis::RewardWeights;
use fedsim::config::ExperimentConfig;
use fedsim::experiment::{cmd_gen, load_env, run_policy_seeds};
use fedsim::marl::{train_marl, EpisodeConfig, PolicyArtifact};
use fedsim::policies::SelectionPolicy;

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn summarize(runs: &[Vec<fedsim::engine::RoundRecord>]) -> (f64, f64, f64, f64, f64) {
    let n = runs.len() as f64;
    let acc = runs.iter().map(|r| r.last().unwrap().acc).sum::<f64>() / n;
    let h = runs
        .iter()
        .map(|r| r.iter().map(|x| x.h_t).sum::<f64>())
        .sum::<f64>()
        / n;
    let b = runs
        .iter()
        .map(|r| r.iter().map(|x| x.b_t).sum::<f64>())
        .sum::<f64>()
        / n;
    let rew = runs
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
    (acc, h, b, rew, sel)
}

fn main() {
    let seeds: Vec<u64> = (0..20).collect();
    let args: Vec<String> = std::env::args().collect();
    let configs: Vec<(usize, usize, f64, usize, usize)> = if args.len() > 1 {
        // dim,hidden,lr,npc,steps tuples from CLI
        args[1..]
            .iter()
            .map(|s| {
                let p: Vec<&str> = s.split(',').collect();
                (
                    p[0].parse().unwrap(),
                    p[1].parse().unwrap(),
                    p[2].parse().unwrap(),
                    p[3].parse().unwrap(),
                    p[4].parse().unwrap(),
                )
            })
            .collect()
    } else {
        vec![(16, 32, 0.5, 2000, 1)]
    };
    for (dim, hidden, lr, npc, steps) in configs {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.dim = dim;
        cfg.dataset.n_per_class = npc;
        cfg.fl.lr = lr;
        cfg.fl.hidden_dims = vec![hidden];
        cfg.marl.steps_per_round = steps;
        if let Ok(qlr) = std::env::var("QLR") {
            cfg.marl.lr = qlr.parse().unwrap();
        }
        if let Ok(ms) = std::env::var("MASTER") {
            cfg.master_seed = ms.parse().unwrap();
        }
        let dir = std::path::PathBuf::from(format!("/tmp/joint_{dim}_{hidden}_{lr}_{npc}"));
        let _ = std::fs::remove_dir_all(&dir);
        cmd_gen(&cfg, &dir).unwrap();
        let env = load_env(&cfg, &dir).unwrap();
        let eval_ep = EpisodeConfig {
            n_sampled: cfg.fl.sampled_per_round,
            rounds: cfg.fl.rounds,
            weights: cfg.reward.weights(),
            variant: cfg.reward.utility,
        };

        // Criterion 4 gap.
        let rd = run_policy_seeds(&env, &SelectionPolicy::RandomDrop { p: 0.5 }, &eval_ep, &cfg, &seeds).unwrap();
        let plr = run_policy_seeds(
            &env,
            &SelectionPolicy::ProbingLossReject { strict_half: false },
            &eval_ep,
            &cfg,
            &seeds,
        )
        .unwrap();
        let rda: Vec<f64> = rd.iter().map(|r| r.last().unwrap().acc).collect();
        let plra: Vec<f64> = plr.iter().map(|r| r.last().unwrap().acc).collect();
        let (m_rd, se_rd) = mean_se(&rda);
        let (m_plr, se_plr) = mean_se(&plra);
        let gap_se = (m_plr - m_rd) / (se_rd * se_rd + se_plr * se_plr).sqrt();

        // Criterion 5/6: default and ablation policies.
        let mut results = Vec::new();
        let mut profiles: Vec<Vec<f64>> = Vec::new();
        for w in [
            RewardWeights::new(1.0, 0.2, 0.1).unwrap(),
            RewardWeights::new(1.0, 0.5, 0.3).unwrap(),
        ] {
            let train_ep = EpisodeConfig {
                weights: w,
                ..eval_ep.clone()
            };
            let outcome =
                train_marl(&env, &train_ep, &cfg.marl, cfg.sub_seed("marl", &[])).unwrap();
            let artifact = PolicyArtifact::from_training(&outcome, &cfg.marl, 0);
            let runs = run_policy_seeds(
                &env,
                &SelectionPolicy::FedMarl { artifact },
                &eval_ep,
                &cfg,
                &seeds,
            )
            .unwrap();
            let mut prof = vec![0.0; eval_ep.rounds];
            for run in &runs {
                for (i, rec) in run.iter().enumerate() {
                    prof[i] += rec.mask.iter().filter(|&&a| a == 1).count() as f64;
                }
            }
            for v in prof.iter_mut() {
                *v /= runs.len() as f64;
            }
            profiles.push(prof);
            results.push(summarize(&runs));
        }
        let (d_acc, d_h, d_b, d_rew, d_sel) = results[0];
        let (a_acc, a_h, a_b, _a_rew, a_sel) = results[1];
        let (sa_acc, sa_h, sa_b, _, _) = summarize(
            &run_policy_seeds(&env, &SelectionPolicy::SelectAll, &eval_ep, &cfg, &seeds).unwrap(),
        );
        let (_, _, _, ths_rew, _) = summarize(
            &run_policy_seeds(&env, &SelectionPolicy::TopHalfSpeed, &eval_ep, &cfg, &seeds).unwrap(),
        );
        println!(
            "dim{dim} h{hidden} lr{lr} npc{npc} steps{steps}: c4gap {gap_se:+.2}se | def acc {d_acc:.3} sel {d_sel:.2} rew {d_rew:.1} (ths {ths_rew:.1}) | abl sel {a_sel:.2} | H {:.3} B {:.3} dacc {:+.3} | c5 H {:.2} B {:.2} (sa acc {sa_acc:.3})",
            a_h / d_h,
            a_b / d_b,
            a_acc - d_acc,
            sa_h / d_h,
            sa_b / d_b,
        );
        let fmt = |p: &Vec<f64>| {
            p.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>().join(" ")
        };
        println!("    def by-round: {}", fmt(&profiles[0]));
        println!("    abl by-round: {}", fmt(&profiles[1]));
    }
}
