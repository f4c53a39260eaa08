//! Client-selection policies behind one interface: keep everyone, drop a
//! random half, keep the fastest half, reject high-probing-loss clients, or
//! ask the trained MARL agents.
//!
//! Every policy emits a mask over the sampled slots with at least one
//! selected client.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;

use crate::marl::{self, AgentState, PolicyArtifact, QNet};
use crate::{Error, Result};

/// A selection policy plus its parameters.
#[derive(Debug, Clone)]
pub enum SelectionPolicy {
    SelectAll,
    RandomDrop { p: f64 },
    TopHalfSpeed,
    ProbingLossReject { strict_half: bool },
    FedMarl { artifact: PolicyArtifact },
}

impl SelectionPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionPolicy::SelectAll => "select_all",
            SelectionPolicy::RandomDrop { .. } => "random_drop",
            SelectionPolicy::TopHalfSpeed => "top_half_speed",
            SelectionPolicy::ProbingLossReject { .. } => "probing_loss_reject",
            SelectionPolicy::FedMarl { .. } => "fedmarl",
        }
    }
}

/// Keeps every sampled client.
pub fn select_all(n: usize) -> Result<Vec<u8>> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one client".into()));
    }
    Ok(vec![1; n])
}

/// Keeps a uniformly random subset of size `round((1 - p) * n)`, at least
/// one.
pub fn random_drop(n: usize, p: f64, rng: &mut ChaCha12Rng) -> Result<Vec<u8>> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one client".into()));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig("drop fraction must be in [0, 1)".into()));
    }
    let keep = (((1.0 - p) * n as f64).round() as usize).clamp(1, n);
    let ids: Vec<usize> = (0..n).collect();
    let kept: Vec<usize> = ids.choose_multiple(rng, keep).copied().collect();
    let mut mask = vec![0u8; n];
    for i in kept {
        mask[i] = 1;
    }
    Ok(mask)
}

/// Keeps the `floor(n / 2)` clients with the smallest probing latency, ties
/// broken by slot index.
pub fn top_half_speed(probe_lat: &[f64]) -> Result<Vec<u8>> {
    let n = probe_lat.len();
    if n < 2 {
        return Err(Error::InvalidConfig(
            "top_half_speed needs at least 2 clients".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        probe_lat[a]
            .partial_cmp(&probe_lat[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![0u8; n];
    for &i in order.iter().take(n / 2) {
        mask[i] = 1;
    }
    Ok(mask)
}

/// Rejects the clients with probing loss strictly above the mean, highest
/// first, capped at `ceil(n / 2)` rejections. With `strict_half` the cap
/// becomes the rule: exactly `ceil(n / 2)` highest-loss clients are
/// rejected regardless of the mean (never all of them).
pub fn probing_loss_reject(losses: &[f64], strict_half: bool) -> Result<Vec<u8>> {
    let n = losses.len();
    if n < 2 {
        return Err(Error::InvalidConfig(
            "probing_loss_reject needs at least 2 clients".into(),
        ));
    }
    let cap = n.div_ceil(2).min(n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    // Highest loss first; ties by slot index.
    order.sort_by(|&a, &b| {
        losses[b]
            .partial_cmp(&losses[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let rejected: Vec<usize> = if strict_half {
        order.into_iter().take(cap).collect()
    } else {
        let mean = losses.iter().sum::<f64>() / n as f64;
        order
            .into_iter()
            .filter(|&i| losses[i] > mean)
            .take(cap)
            .collect()
    };
    let mut mask = vec![1u8; n];
    for i in rejected {
        mask[i] = 0;
    }
    Ok(mask)
}

/// Greedy MARL decision with the all-zero repair: when every agent votes to
/// terminate, the slot with the largest Q(s,1) - Q(s,0) gap is selected.
pub fn fedmarl_mask(states: &[AgentState], qnet: &QNet) -> Result<Vec<u8>> {
    if states.is_empty() {
        return Err(Error::InvalidConfig("need at least one agent state".into()));
    }
    let mut mask = Vec::with_capacity(states.len());
    for s in states {
        let q = qnet.q_pair(s)?;
        mask.push(u8::from(q[1] >= q[0]));
    }
    if mask.iter().all(|&a| a == 0) {
        mask[marl::best_gap_slot(states, qnet)?] = 1;
    }
    Ok(mask)
}

/// Inputs a policy may consume when deciding a round.
pub struct RoundContext<'a> {
    pub probe_losses: &'a [f64],
    pub probe_lat: &'a [f64],
    /// Normalized agent states (present when a MARL policy runs).
    pub states: Option<&'a [AgentState]>,
}

/// Dispatches to the concrete policy.
pub fn decide(
    policy: &SelectionPolicy,
    ctx: &RoundContext<'_>,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<u8>> {
    let n = ctx.probe_losses.len();
    match policy {
        SelectionPolicy::SelectAll => select_all(n),
        SelectionPolicy::RandomDrop { p } => random_drop(n, *p, rng),
        SelectionPolicy::TopHalfSpeed => top_half_speed(ctx.probe_lat),
        SelectionPolicy::ProbingLossReject { strict_half } => {
            probing_loss_reject(ctx.probe_losses, *strict_half)
        }
        SelectionPolicy::FedMarl { artifact } => {
            let states = ctx.states.ok_or_else(|| {
                Error::InvalidConfig("fedmarl policy needs agent states".into())
            })?;
            fedmarl_mask(states, &artifact.qnet())
        }
    }
}
