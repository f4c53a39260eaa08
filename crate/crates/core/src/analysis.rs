//! Reward computation, objective scoring, weight-divergence diagnostics and
//! summary reporting.
//!
//! The shaped team reward of a round is
//! `r_t = w1 [U(Acc(t)) - U(Acc(t-1))] - w2 H_t - w3 B_t`, while the raw
//! episode objective is `w1 Acc(T) - w2 ΣH_t - w3 ΣB_t`. The divergence
//! tracker runs a federated trajectory and a centralized-SGD trajectory on
//! the pooled data in lockstep and evaluates a recursive bound on their
//! parameter distance from empirically estimated constants.

use crate::data::{histogram, Dataset};
use crate::engine::{aggregate_weighted, RoundRecord};
use crate::nn::{self, Batch, MlpSpec, ParamVector};
use crate::policies::{decide, RoundContext, SelectionPolicy};
use crate::{rng, Error, Result};

/// Relative importance of accuracy, latency and communication cost.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 0.2,
            w3: 0.1,
        }
    }
}

impl RewardWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self> {
        let w = Self { w1, w2, w3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.w1, self.w2, self.w3];
        if ws.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidConfig(
                "reward weights must be nonnegative".into(),
            ));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidConfig(
                "reward weights cannot all be zero".into(),
            ));
        }
        Ok(())
    }
}

/// Which utility-shaping formula to use.
///
/// `PaperFormula` evaluates `10 - 20 / (1 + exp(0.35 (1 - x)))`, which is
/// strictly decreasing in accuracy. `Increasing` (the default) mirrors the
/// sign, `10 - 20 / (1 + exp(0.35 (x - 1)))`, so higher accuracy yields
/// higher utility; both agree at `x = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityVariant {
    PaperFormula,
    Increasing,
}

impl Default for UtilityVariant {
    fn default() -> Self {
        UtilityVariant::Increasing
    }
}

/// Utility shaping of a test accuracy in `[0, 1]`.
pub fn utility(acc: f64, variant: UtilityVariant) -> Result<f64> {
    if !(0.0..=1.0).contains(&acc) {
        return Err(Error::InvalidConfig(format!(
            "accuracy {acc} outside [0, 1]"
        )));
    }
    let exponent = match variant {
        UtilityVariant::PaperFormula => 0.35 * (1.0 - acc),
        UtilityVariant::Increasing => 0.35 * (acc - 1.0),
    };
    Ok(10.0 - 20.0 / (1.0 + exponent.exp()))
}

/// Shaped team reward of one completed round.
pub fn round_reward(
    record: &RoundRecord,
    prev_acc: f64,
    weights: &RewardWeights,
    variant: UtilityVariant,
) -> Result<f64> {
    weights.validate()?;
    if !record.h_t.is_finite() || !record.b_t.is_finite() {
        return Err(Error::NonFinite("round record".into()));
    }
    let du = utility(record.acc, variant)? - utility(prev_acc, variant)?;
    Ok(weights.w1 * du - weights.w2 * record.h_t - weights.w3 * record.b_t)
}

/// Raw episode objective: final accuracy against total latency and cost,
/// unshaped. This is the evaluation metric, distinct from the shaped
/// training reward.
pub fn episode_objective(records: &[RoundRecord], weights: &RewardWeights) -> f64 {
    let acc_final = records.last().map(|r| r.acc).unwrap_or(0.0);
    let sum_h: f64 = records.iter().map(|r| r.h_t).sum();
    let sum_b: f64 = records.iter().map(|r| r.b_t).sum();
    weights.w1 * acc_final - weights.w2 * sum_h - weights.w3 * sum_b
}

/// Per-policy summary over seeds.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub policy: String,
    pub seeds: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub sum_h_mean: f64,
    pub sum_b_mean: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub norm_latency: Option<f64>,
    pub norm_comm: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates per-policy runs (one list of round records per seed) into
/// mean/std rows; latency and cost columns are additionally normalized by
/// the `fedmarl` row when present.
pub fn report(runs_by_policy: &[(String, Vec<Vec<RoundRecord>>)]) -> Result<Vec<SummaryRow>> {
    if runs_by_policy.is_empty() || runs_by_policy.iter().any(|(_, runs)| runs.is_empty()) {
        return Err(Error::InvalidConfig(
            "report needs at least one completed run per policy".into(),
        ));
    }
    let mut rows: Vec<SummaryRow> = runs_by_policy
        .iter()
        .map(|(policy, runs)| {
            let accs: Vec<f64> = runs
                .iter()
                .map(|rs| rs.last().map(|r| r.acc).unwrap_or(0.0))
                .collect();
            let sum_h: Vec<f64> = runs
                .iter()
                .map(|rs| rs.iter().map(|r| r.h_t).sum())
                .collect();
            let sum_b: Vec<f64> = runs
                .iter()
                .map(|rs| rs.iter().map(|r| r.b_t).sum())
                .collect();
            let rewards: Vec<f64> = runs
                .iter()
                .map(|rs| rs.iter().map(|r| r.reward).sum())
                .collect();
            let (acc_mean, acc_std) = mean_std(&accs);
            let (sum_h_mean, _) = mean_std(&sum_h);
            let (sum_b_mean, _) = mean_std(&sum_b);
            let (reward_mean, reward_std) = mean_std(&rewards);
            SummaryRow {
                policy: policy.clone(),
                seeds: runs.len(),
                acc_mean,
                acc_std,
                sum_h_mean,
                sum_b_mean,
                reward_mean,
                reward_std,
                norm_latency: None,
                norm_comm: None,
            }
        })
        .collect();
    let reference = rows
        .iter()
        .find(|r| r.policy == "fedmarl")
        .map(|r| (r.sum_h_mean, r.sum_b_mean));
    if let Some((ref_h, ref_b)) = reference {
        for row in rows.iter_mut() {
            row.norm_latency = Some(row.sum_h_mean / ref_h);
            row.norm_comm = Some(row.sum_b_mean / ref_b);
        }
    }
    Ok(rows)
}

/// Summary rows as CSV with the fixed column set.
pub fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "policy,seeds,acc_mean,acc_std,sum_H_mean,sum_B_mean,reward_mean,reward_std,norm_latency,norm_comm\n",
    );
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.policy,
            r.seeds,
            r.acc_mean,
            r.acc_std,
            r.sum_h_mean,
            r.sum_b_mean,
            r.reward_mean,
            r.reward_std,
            opt(r.norm_latency),
            opt(r.norm_comm),
        ));
    }
    out
}

/// Configuration of a divergence-tracking run. Latency simulation plays no
/// role here; only the weight trajectories matter, so the policy must be
/// one that decides from probing losses alone.
#[derive(Debug, Clone)]
pub struct DivergenceConfig {
    pub spec: MlpSpec,
    pub lr: f64,
    pub batch_size: usize,
    /// Total local epochs per round (probing epoch included).
    pub epochs_per_round: usize,
    pub rounds: usize,
    pub init_seed: u64,
    pub master_seed: u64,
    pub policy: SelectionPolicy,
}

/// One round of the divergence report.
#[derive(Debug, Clone)]
pub struct RoundDivergence {
    pub t: usize,
    /// Measured `||W_glb^t - V_iid^{Et}||`.
    pub divergence: f64,
    /// Evaluated recursive bound.
    pub bound: f64,
    /// Set when the measured divergence exceeds the bound.
    pub violated: bool,
}

/// Divergence trajectory plus the estimated constants behind the bound.
#[derive(Debug, Clone)]
pub struct DivergenceReport {
    pub rounds: Vec<RoundDivergence>,
    /// Estimated per-class Lipschitz constants of the expected per-class
    /// log-probability gradient.
    pub sigma: Vec<f64>,
    /// Max observed per-class gradient norm.
    pub c_max: f64,
    /// Max over rounds of the label-mixture residual.
    pub epsilon: f64,
    pub eps_t: Vec<f64>,
}

impl DivergenceReport {
    pub fn any_violation(&self) -> bool {
        self.rounds.iter().any(|r| r.violated)
    }
}

/// Gradient of the mean log-probability of class `m` over the class-`m`
/// rows of `batch` (the object the stability analysis manipulates).
fn class_grad(
    params: &ParamVector,
    spec: &MlpSpec,
    batch: &Batch,
    class: usize,
) -> Result<Option<ParamVector>> {
    let rows: Vec<usize> = (0..batch.n())
        .filter(|&i| batch.labels()[i] == class)
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let sub = batch.select(&rows)?;
    let logits = nn::forward_logits(params, spec, sub.inputs(), sub.n())?;
    let m = spec.output_dim;
    let inv_n = 1.0 / sub.n() as f64;
    let mut dlogits = vec![0.0; sub.n() * m];
    let mut probs = vec![0.0; m];
    for r in 0..sub.n() {
        let row = &logits[r * m..(r + 1) * m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, &l) in probs.iter_mut().zip(row) {
            *p = (l - max).exp();
            sum += *p;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let d = &mut dlogits[r * m..(r + 1) * m];
        for (j, dj) in d.iter_mut().enumerate() {
            let target = if j == class { 1.0 } else { 0.0 };
            *dj = (target - probs[j]) * inv_n;
        }
    }
    Ok(Some(nn::backward_from_logits_grad(
        params,
        spec,
        sub.inputs(),
        sub.n(),
        &dlogits,
    )?))
}

/// Runs a federated trajectory and a centralized-SGD trajectory on the
/// pooled shard data in lockstep, recording their parameter distance per
/// round and evaluating the recursive stability bound with empirically
/// estimated constants. The bound check is a diagnostic: violations are
/// flagged, not asserted.
pub fn divergence_track(
    ds: &Dataset,
    shards: &[Vec<usize>],
    cfg: &DivergenceConfig,
) -> Result<DivergenceReport> {
    if shards.is_empty() {
        return Err(Error::InvalidConfig("need at least one shard".into()));
    }
    match cfg.policy {
        SelectionPolicy::SelectAll
        | SelectionPolicy::RandomDrop { .. }
        | SelectionPolicy::ProbingLossReject { .. } => {}
        _ => {
            return Err(Error::InvalidConfig(
                "divergence tracking supports loss-based policies only".into(),
            ))
        }
    }
    if cfg.epochs_per_round == 0 || cfg.rounds == 0 {
        return Err(Error::InvalidConfig("need epochs and rounds >= 1".into()));
    }
    let n_classes = ds.n_classes;
    let n_clients = shards.len();
    let client_batches: Vec<Batch> = shards
        .iter()
        .map(|s| ds.batch_of(s))
        .collect::<Result<_>>()?;
    let sizes: Vec<f64> = shards.iter().map(|s| s.len() as f64).collect();
    let union_indices: Vec<usize> = {
        let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    };
    let union = ds.batch_of(&union_indices)?;
    let p_global = histogram(
        &union_indices.iter().map(|&i| ds.labels[i]).collect::<Vec<_>>(),
        n_classes,
    );
    let p_client: Vec<Vec<f64>> = shards
        .iter()
        .map(|s| histogram(&s.iter().map(|&i| ds.labels[i]).collect::<Vec<_>>(), n_classes))
        .collect();

    let mut w = nn::init_params(&cfg.spec, cfg.init_seed);
    let mut v = w.clone();

    // Snapshots of both trajectories with their per-class gradients, used to
    // estimate c_max and the Lipschitz constants afterwards.
    let mut snapshots: Vec<(ParamVector, Vec<Option<ParamVector>>)> = Vec::new();
    let snapshot = |params: &ParamVector,
                        snapshots: &mut Vec<(ParamVector, Vec<Option<ParamVector>>)>|
     -> Result<()> {
        let grads: Vec<Option<ParamVector>> = (0..n_classes)
            .map(|m| class_grad(params, &cfg.spec, &union, m))
            .collect::<Result<_>>()?;
        snapshots.push((params.clone(), grads));
        Ok(())
    };
    snapshot(&w, &mut snapshots)?;

    let mut divergences = Vec::with_capacity(cfg.rounds);
    let mut eps_t = Vec::with_capacity(cfg.rounds);
    let mut q_per_round: Vec<Vec<f64>> = Vec::with_capacity(cfg.rounds);

    for t in 1..=cfg.rounds {
        // Probing epoch on every client, then the policy decides who
        // finishes the remaining epochs.
        let mut probe_losses = Vec::with_capacity(n_clients);
        let mut after_probe = Vec::with_capacity(n_clients);
        let mut probe_rngs = Vec::with_capacity(n_clients);
        for (c, batch) in client_batches.iter().enumerate() {
            let mut rng = rng::stream(cfg.master_seed, "local-train", &[t as u64, c as u64]);
            let (params, loss) =
                crate::engine::train_epochs(&w, &cfg.spec, batch, 1, cfg.lr, cfg.batch_size, &mut rng)?;
            probe_losses.push(loss);
            after_probe.push(params);
            probe_rngs.push(rng);
        }
        let zeros = vec![0.0; n_clients];
        let mut policy_rng = rng::stream(cfg.master_seed, "policy", &[t as u64]);
        let ctx = RoundContext {
            probe_losses: &probe_losses,
            probe_lat: &zeros,
            states: None,
        };
        let mask = decide(&cfg.policy, &ctx, &mut policy_rng)?;

        let mut finals = Vec::with_capacity(n_clients);
        for (c, start) in after_probe.into_iter().enumerate() {
            if mask[c] != 0 && cfg.epochs_per_round > 1 {
                let mut rng = probe_rngs[c].clone();
                let (params, _) = crate::engine::train_epochs(
                    &start,
                    &cfg.spec,
                    &client_batches[c],
                    cfg.epochs_per_round - 1,
                    cfg.lr,
                    cfg.batch_size,
                    &mut rng,
                )?;
                finals.push(params);
            } else {
                finals.push(start);
            }
        }
        w = aggregate_weighted(&finals, &sizes, &mask)?;

        // Centralized arm: E epochs of SGD on the pooled data.
        let mut central_rng = rng::stream(cfg.master_seed, "central", &[t as u64]);
        let (v_next, _) = crate::engine::train_epochs(
            &v,
            &cfg.spec,
            &union,
            cfg.epochs_per_round,
            cfg.lr,
            cfg.batch_size,
            &mut central_rng,
        )?;
        v = v_next;

        divergences.push(w.sub(&v)?.norm());
        let total_selected: f64 = sizes
            .iter()
            .zip(&mask)
            .filter(|&(_, &a)| a != 0)
            .map(|(&d, _)| d)
            .sum();
        let q: Vec<f64> = (0..n_clients)
            .map(|c| {
                if mask[c] != 0 {
                    sizes[c] / total_selected
                } else {
                    0.0
                }
            })
            .collect();
        let eps = (0..n_classes)
            .map(|m| {
                let mixture: f64 = (0..n_clients).map(|c| q[c] * p_client[c][m]).sum();
                (p_global[m] - mixture).abs()
            })
            .fold(0.0, f64::max);
        eps_t.push(eps);
        q_per_round.push(q);

        snapshot(&w, &mut snapshots)?;
        snapshot(&v, &mut snapshots)?;
    }

    // Constants: c_max as the max observed per-class gradient norm, sigma_m
    // by Lipschitz probing over all snapshot pairs.
    let mut c_max = 0.0f64;
    for (_, grads) in &snapshots {
        for g in grads.iter().flatten() {
            c_max = c_max.max(g.norm());
        }
    }
    let mut sigma = vec![0.0f64; n_classes];
    for i in 0..snapshots.len() {
        for j in i + 1..snapshots.len() {
            let dist = snapshots[i].0.sub(&snapshots[j].0)?.norm();
            if dist < 1e-12 {
                continue;
            }
            for m in 0..n_classes {
                if let (Some(gi), Some(gj)) = (&snapshots[i].1[m], &snapshots[j].1[m]) {
                    sigma[m] = sigma[m].max(gi.sub(gj)?.norm() / dist);
                }
            }
        }
    }
    let epsilon = eps_t.iter().cloned().fold(0.0, f64::max);

    // Recursive bound, evaluated with the estimated constants.
    let u: Vec<f64> = (0..n_clients)
        .map(|c| {
            1.0 + cfg.lr
                * (0..n_classes)
                    .map(|m| p_client[c][m] * sigma[m])
                    .sum::<f64>()
        })
        .collect();
    let e = cfg.epochs_per_round as i32;
    let geom: Vec<f64> = u
        .iter()
        .map(|&un| (1..e).map(|j| un.powi(j)).sum::<f64>())
        .collect();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut prev_bound = 0.0f64;
    let n_agents = n_clients as f64;
    for t in 0..cfg.rounds {
        let mut bound = 0.0;
        for c in 0..n_clients {
            let qc = q_per_round[t][c];
            if qc == 0.0 {
                continue;
            }
            let p_dist: f64 = (0..n_classes)
                .map(|m| (p_client[c][m] - p_global[m]).abs())
                .sum();
            bound += qc
                * (u[c].powi(e) * prev_bound
                    + cfg.lr * epsilon * n_agents * n_classes as f64 * c_max
                    + cfg.lr * c_max * p_dist * geom[c]);
        }
        let divergence = divergences[t];
        rounds.push(RoundDivergence {
            t: t + 1,
            divergence,
            bound,
            violated: divergence > bound,
        });
        prev_bound = bound;
    }

    Ok(DivergenceReport {
        rounds,
        sigma,
        c_max,
        epsilon,
        eps_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_dataset;
    use crate::nn::Activation;

    fn mk_record(h_t: f64, b_t: f64, acc: f64) -> RoundRecord {
        RoundRecord {
            t: 1,
            clients: vec![0],
            probe_loss: vec![0.0],
            probe_lat: vec![0.0],
            mask: vec![1],
            rest_lat: vec![0.0],
            upload_lat: vec![0.0],
            download_lat: vec![0.0],
            h_t,
            b_t,
            acc,
            reward: 0.0,
        }
    }

    #[test]
    fn utility_at_perfect_accuracy_is_zero() {
        for v in [UtilityVariant::PaperFormula, UtilityVariant::Increasing] {
            assert!(utility(1.0, v).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn utility_at_zero_matches_direct_evaluation() {
        // Straight-line evaluation of both formulas at x = 0.
        let paper = 10.0 - 20.0 / (1.0 + (0.35f64).exp());
        let incr = 10.0 - 20.0 / (1.0 + (-0.35f64).exp());
        let up = utility(0.0, UtilityVariant::PaperFormula).unwrap();
        let ui = utility(0.0, UtilityVariant::Increasing).unwrap();
        assert!((up - paper).abs() < 1e-12);
        assert!((ui - incr).abs() < 1e-12);
        assert!((up - 1.7324).abs() < 1e-3);
        assert!((ui + 1.7324).abs() < 1e-3);
    }

    #[test]
    fn increasing_variant_is_strictly_increasing() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            let u = utility(x, UtilityVariant::Increasing).unwrap();
            assert!(u > prev, "not increasing at {x}");
            prev = u;
        }
        // The printed formula is decreasing on the same grid.
        let a = utility(0.2, UtilityVariant::PaperFormula).unwrap();
        let b = utility(0.8, UtilityVariant::PaperFormula).unwrap();
        assert!(a > b);
    }

    #[test]
    fn utility_rejects_out_of_range() {
        assert!(utility(-0.1, UtilityVariant::Increasing).is_err());
        assert!(utility(1.1, UtilityVariant::Increasing).is_err());
    }

    #[test]
    fn round_reward_hand_example() {
        // Accuracy unchanged, H = 8, B = 5, weights (1, 0.2, 0.1): -2.1.
        let record = mk_record(8.0, 5.0, 0.4);
        let w = RewardWeights::default();
        let r = round_reward(&record, 0.4, &w, UtilityVariant::Increasing).unwrap();
        assert!((r + 2.1).abs() < 1e-12, "reward {r}");
    }

    #[test]
    fn round_reward_positive_when_only_accuracy_matters() {
        let record = mk_record(8.0, 5.0, 0.6);
        let w = RewardWeights::new(1.0, 0.0, 0.0).unwrap();
        let r = round_reward(&record, 0.4, &w, UtilityVariant::Increasing).unwrap();
        assert!(r > 0.0);
    }

    #[test]
    fn round_reward_is_linear_in_weights() {
        let record = mk_record(3.0, 2.0, 0.7);
        let w = RewardWeights::new(1.0, 0.2, 0.1).unwrap();
        let c = 3.7;
        let scaled = RewardWeights::new(c * w.w1, c * w.w2, c * w.w3).unwrap();
        let r1 = round_reward(&record, 0.5, &w, UtilityVariant::Increasing).unwrap();
        let r2 = round_reward(&record, 0.5, &scaled, UtilityVariant::Increasing).unwrap();
        assert!((r2 - c * r1).abs() < 1e-12);
    }

    #[test]
    fn episode_objective_hand_example() {
        // Two rounds, Acc(T) = 0.5, sums 10 and 4: 0.5 - 2 - 0.4 = -1.9.
        let records = vec![mk_record(6.0, 3.0, 0.3), mk_record(4.0, 1.0, 0.5)];
        let w = RewardWeights::default();
        let obj = episode_objective(&records, &w);
        assert!((obj + 1.9).abs() < 1e-12, "objective {obj}");
        // Accuracy-only weights: the objective is the final accuracy.
        let w_acc = RewardWeights::new(1.0, 0.0, 0.0).unwrap();
        assert!((episode_objective(&records, &w_acc) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn episode_objective_prefers_lower_latency() {
        let a = vec![mk_record(6.0, 3.0, 0.5), mk_record(6.0, 3.0, 0.5)];
        let b = vec![mk_record(5.0, 3.0, 0.5), mk_record(6.0, 3.0, 0.5)];
        let w = RewardWeights::default();
        assert!(episode_objective(&b, &w) > episode_objective(&a, &w));
    }

    #[test]
    fn objective_telescopes_against_round_contributions() {
        // With w1 applied to raw accuracy (shaping disabled via a linear
        // "utility"), the objective equals the telescoped sum of per-round
        // contributions plus the initial accuracy term.
        let mut r = crate::rng::stream(31, "tele", &[]);
        use rand::Rng;
        for _ in 0..20 {
            let t = r.gen_range(2..6);
            let mut acc_prev: f64 = r.gen_range(0.0..0.3);
            let acc0 = acc_prev;
            let mut records = Vec::new();
            for _ in 0..t {
                let acc = (acc_prev + r.gen_range(0.0..0.2)).min(1.0);
                records.push(mk_record(r.gen_range(1.0..9.0), r.gen_range(1.0..5.0), acc));
                acc_prev = acc;
            }
            let w = RewardWeights::default();
            let objective = episode_objective(&records, &w);
            let mut telescoped = w.w1 * acc0;
            let mut prev = acc0;
            for rec in &records {
                telescoped += w.w1 * (rec.acc - prev) - w.w2 * rec.h_t - w.w3 * rec.b_t;
                prev = rec.acc;
            }
            assert!((objective - telescoped).abs() < 1e-10);
        }
    }

    #[test]
    fn report_single_run_and_self_normalization() {
        let fed = vec![vec![mk_record(4.0, 2.0, 0.8)]];
        let all = vec![vec![mk_record(8.0, 4.0, 0.7)]];
        let rows = report(&[
            ("fedmarl".to_string(), fed),
            ("select_all".to_string(), all),
        ])
        .unwrap();
        assert_eq!(rows[0].acc_std, 0.0);
        assert_eq!(rows[0].norm_latency, Some(1.0));
        assert_eq!(rows[0].norm_comm, Some(1.0));
        assert_eq!(rows[1].norm_latency, Some(2.0));
        assert_eq!(rows[1].norm_comm, Some(2.0));
        let csv = summary_to_csv(&rows);
        assert!(csv.starts_with(
            "policy,seeds,acc_mean,acc_std,sum_H_mean,sum_B_mean,reward_mean,reward_std,norm_latency,norm_comm"
        ));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn report_without_fedmarl_leaves_norm_empty() {
        let rows = report(&[("select_all".to_string(), vec![vec![mk_record(1.0, 1.0, 0.5)]])])
            .unwrap();
        assert_eq!(rows[0].norm_latency, None);
        let csv = summary_to_csv(&rows);
        assert!(csv.lines().nth(1).unwrap().ends_with(",,"));
    }

    #[test]
    fn report_rejects_empty_input() {
        assert!(report(&[]).is_err());
    }

    fn iid_single_client_config(spec: MlpSpec) -> DivergenceConfig {
        DivergenceConfig {
            spec,
            lr: 0.05,
            batch_size: usize::MAX,
            epochs_per_round: 3,
            rounds: 4,
            init_seed: 11,
            master_seed: 13,
            policy: SelectionPolicy::SelectAll,
        }
    }

    #[test]
    fn single_iid_client_divergence_is_exactly_zero() {
        let ds = gen_dataset(3, 5, 60, 41).unwrap();
        let spec = MlpSpec::new(5, vec![6], 3, Activation::Relu).unwrap();
        let shards = vec![(0..ds.n()).collect::<Vec<usize>>()];
        let report = divergence_track(&ds, &shards, &iid_single_client_config(spec)).unwrap();
        for r in &report.rounds {
            assert_eq!(r.divergence, 0.0, "round {}", r.t);
            assert!(!r.violated);
        }
        assert!(report.epsilon.abs() < 1e-15);
    }

    #[test]
    fn epsilon_is_zero_for_exact_mixture() {
        // Two clients whose shards partition the data with equal sizes and
        // both selected: the weighted mixture is the global distribution.
        let ds = gen_dataset(2, 5, 40, 43).unwrap();
        let shards: Vec<Vec<usize>> = vec![
            (0..ds.n()).filter(|&i| ds.labels[i] == 0).collect(),
            (0..ds.n()).filter(|&i| ds.labels[i] == 1).collect(),
        ];
        let spec = MlpSpec::new(5, vec![4], 2, Activation::Relu).unwrap();
        let cfg = DivergenceConfig {
            spec,
            lr: 0.02,
            batch_size: usize::MAX,
            epochs_per_round: 2,
            rounds: 3,
            init_seed: 3,
            master_seed: 5,
            policy: SelectionPolicy::SelectAll,
        };
        let report = divergence_track(&ds, &shards, &cfg).unwrap();
        for eps in &report.eps_t {
            assert!(eps.abs() < 1e-12);
        }
        assert!(report.rounds.iter().all(|r| r.divergence > 0.0));
    }

    #[test]
    fn two_client_toy_respects_bound() {
        let ds = gen_dataset(2, 4, 50, 47).unwrap();
        let shards: Vec<Vec<usize>> = vec![
            (0..ds.n()).filter(|&i| ds.labels[i] == 0).collect(),
            (0..ds.n()).filter(|&i| ds.labels[i] == 1).collect(),
        ];
        let spec = MlpSpec::new(4, vec![3], 2, Activation::Relu).unwrap();
        let cfg = DivergenceConfig {
            spec,
            lr: 0.01,
            batch_size: usize::MAX,
            epochs_per_round: 2,
            rounds: 5,
            init_seed: 7,
            master_seed: 9,
            policy: SelectionPolicy::SelectAll,
        };
        let report = divergence_track(&ds, &shards, &cfg).unwrap();
        assert_eq!(report.rounds.len(), 5);
        assert!(
            !report.any_violation(),
            "bound violated: {:?}",
            report.rounds
        );
    }

    #[test]
    fn divergence_rejects_latency_policies() {
        let ds = gen_dataset(2, 4, 20, 51).unwrap();
        let shards = vec![(0..ds.n()).collect::<Vec<usize>>()];
        let spec = MlpSpec::new(4, vec![3], 2, Activation::Relu).unwrap();
        let cfg = DivergenceConfig {
            policy: SelectionPolicy::TopHalfSpeed,
            ..iid_single_client_config(spec)
        };
        assert!(divergence_track(&ds, &shards, &cfg).is_err());
    }
}
