//! Communication intervals, budgets, and cost accounting.
//!
//! A client's interval level fixes how many local gradient updates it runs
//! between server synchronizations; its frequency is the number of sync
//! events that interval induces within a round of L updates. Costs are
//! counted in parameter-transfer units: one sync event moves the model up
//! and down once, costing twice the model size.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::seeding;

/// Named communication interval levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalLevel {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl IntervalLevel {
    pub const ALL: [IntervalLevel; 7] = [
        IntervalLevel::A,
        IntervalLevel::B,
        IntervalLevel::C,
        IntervalLevel::D,
        IntervalLevel::E,
        IntervalLevel::F,
        IntervalLevel::G,
    ];

    /// Local gradient updates between server syncs.
    pub fn updates_between_syncs(self) -> u32 {
        match self {
            IntervalLevel::A => 1,
            IntervalLevel::B => 4,
            IntervalLevel::C => 16,
            IntervalLevel::D => 32,
            IntervalLevel::E => 64,
            IntervalLevel::F => 128,
            IntervalLevel::G => 256,
        }
    }

    /// Sync events within a round of `updates_per_round` updates.
    pub fn frequency(self, updates_per_round: u32) -> u32 {
        sync_points(updates_per_round, self.updates_between_syncs()).len() as u32
    }
}

impl fmt::Display for IntervalLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            IntervalLevel::A => 'a',
            IntervalLevel::B => 'b',
            IntervalLevel::C => 'c',
            IntervalLevel::D => 'd',
            IntervalLevel::E => 'e',
            IntervalLevel::F => 'f',
            IntervalLevel::G => 'g',
        };
        write!(f, "{c}")
    }
}

impl std::str::FromStr for IntervalLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(IntervalLevel::A),
            "b" => Ok(IntervalLevel::B),
            "c" => Ok(IntervalLevel::C),
            "d" => Ok(IntervalLevel::D),
            "e" => Ok(IntervalLevel::E),
            "f" => Ok(IntervalLevel::F),
            "g" => Ok(IntervalLevel::G),
            other => Err(Error::validation(format!("unknown interval level {other:?}"))),
        }
    }
}

/// Update indices at which a client syncs: multiples of the interval within
/// 1..=L, plus the end-of-round sync at L.
pub fn sync_points(updates_per_round: u32, interval: u32) -> Vec<u32> {
    assert!(updates_per_round >= 1 && interval >= 1);
    let mut points: Vec<u32> = (1..=updates_per_round).filter(|l| l % interval == 0).collect();
    if points.last() != Some(&updates_per_round) {
        points.push(updates_per_round);
    }
    points
}

/// Transfer cost of one client for a round: up and down once per sync event.
pub fn client_cost(model_size: usize, frequency: u32) -> u64 {
    2 * model_size as u64 * u64::from(frequency)
}

/// One client's frequency assignment for a round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientFrequency {
    pub client_id: usize,
    /// Sync events this round.
    pub frequency: u32,
    /// Updates between syncs.
    pub interval: u32,
    pub level: IntervalLevel,
}

/// Frequency/interval assignment for every active client of a round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyAssignment {
    pub clients: Vec<ClientFrequency>,
    pub high_frequency: u32,
    pub low_frequency: u32,
    pub updates_per_round: u32,
}

impl FrequencyAssignment {
    pub fn client(&self, client_id: usize) -> Option<&ClientFrequency> {
        self.clients.iter().find(|c| c.client_id == client_id)
    }
}

/// Assign the high level to members of `high_subset` and the low level to
/// the rest of the active set.
pub fn assign_frequencies(
    actives: &[usize],
    high_subset: &BTreeSet<usize>,
    updates_per_round: u32,
    high_level: IntervalLevel,
    low_level: IntervalLevel,
) -> Result<FrequencyAssignment> {
    let active_set: BTreeSet<usize> = actives.iter().copied().collect();
    if active_set.len() != actives.len() {
        return Err(Error::validation("duplicate client id among actives"));
    }
    if let Some(&stray) = high_subset.difference(&active_set).next() {
        return Err(Error::validation(format!(
            "high-frequency client {stray} is not in the active set"
        )));
    }
    let high_frequency = high_level.frequency(updates_per_round);
    let low_frequency = low_level.frequency(updates_per_round);
    let mut clients: Vec<ClientFrequency> = active_set
        .iter()
        .map(|&client_id| {
            let level = if high_subset.contains(&client_id) { high_level } else { low_level };
            ClientFrequency {
                client_id,
                frequency: level.frequency(updates_per_round),
                interval: level.updates_between_syncs(),
                level,
            }
        })
        .collect();
    clients.sort_by_key(|c| c.client_id);
    Ok(FrequencyAssignment { clients, high_frequency, low_frequency, updates_per_round })
}

/// Per-client transfer costs and their server-side total for a round.
pub fn round_cost(assignment: &FrequencyAssignment, model_size: usize) -> (Vec<(usize, u64)>, u64) {
    let per_client: Vec<(usize, u64)> = assignment
        .clients
        .iter()
        .map(|c| (c.client_id, client_cost(model_size, c.frequency)))
        .collect();
    let total = per_client.iter().map(|&(_, cost)| cost).sum();
    (per_client, total)
}

/// A round's server cost relative to the every-update-sync reference: all
/// active clients syncing L times each.
pub fn normalized_cost(
    server_cost: u64,
    updates_per_round: u32,
    model_size: usize,
    active_count: usize,
) -> f64 {
    assert!(updates_per_round >= 1);
    let reference =
        2 * model_size as u64 * active_count as u64 * u64::from(updates_per_round);
    server_cost as f64 / reference as f64
}

/// Budget regime: which side of the system is resource-constrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetMode {
    /// A fixed fraction of clients can afford high frequency; the server is
    /// unconstrained.
    Fix,
    /// Every client can afford high frequency; a finite server budget caps
    /// how many do.
    Dynamic,
}

/// Per-client and server transfer budgets for every round.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSet {
    pub mode: BudgetMode,
    pub beta: f64,
    /// tau_m, indexed by client id.
    pub client_budgets: Vec<u64>,
    /// tau_g; `u64::MAX` means unbounded.
    pub server_budget: u64,
    /// Clients whose budget admits high frequency (fix mode).
    pub high_capable: BTreeSet<usize>,
}

impl BudgetSet {
    pub fn client_budget(&self, client_id: usize) -> u64 {
        self.client_budgets[client_id]
    }
}

/// Build the budget set for a run.
///
/// Fix mode grants floor(beta * M) seeded-random clients exactly the
/// high-frequency round cost and everyone else exactly the low-frequency
/// round cost, with an unbounded server. Dynamic mode grants every client
/// the high cost and caps the server at what floor(beta * A) high-frequency
/// actives plus the remaining low-frequency actives would spend, where A is
/// the expected active count `max(floor(active_fraction * M), 1)`.
#[allow(clippy::too_many_arguments)]
pub fn make_budgets(
    mode: BudgetMode,
    beta: f64,
    num_clients: usize,
    model_size: usize,
    updates_per_round: u32,
    high_level: IntervalLevel,
    low_level: IntervalLevel,
    active_fraction: f64,
    seed: u64,
) -> Result<BudgetSet> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::validation(format!("beta {beta} outside (0, 1]")));
    }
    if num_clients == 0 {
        return Err(Error::validation("num_clients must be positive"));
    }
    if !(active_fraction > 0.0 && active_fraction <= 1.0) {
        return Err(Error::validation(format!("active_fraction {active_fraction} outside (0, 1]")));
    }
    let high_cost = client_cost(model_size, high_level.frequency(updates_per_round));
    let low_cost = client_cost(model_size, low_level.frequency(updates_per_round));
    match mode {
        BudgetMode::Fix => {
            let capable_count = ((beta * num_clients as f64).floor() as usize).min(num_clients);
            let mut ids: Vec<usize> = (0..num_clients).collect();
            use rand::seq::SliceRandom;
            let mut rng = seeding::stream(seed, "budgets-fix", &[]);
            ids.shuffle(&mut rng);
            let high_capable: BTreeSet<usize> = ids.into_iter().take(capable_count).collect();
            let client_budgets = (0..num_clients)
                .map(|m| if high_capable.contains(&m) { high_cost } else { low_cost })
                .collect();
            Ok(BudgetSet {
                mode,
                beta,
                client_budgets,
                server_budget: u64::MAX,
                high_capable,
            })
        }
        BudgetMode::Dynamic => {
            let expected_active =
                ((active_fraction * num_clients as f64).floor() as usize).max(1);
            let high_count = ((beta * expected_active as f64).floor() as usize).min(expected_active);
            let server_budget = high_count as u64 * high_cost
                + (expected_active - high_count) as u64 * low_cost;
            Ok(BudgetSet {
                mode,
                beta,
                client_budgets: vec![high_cost; num_clients],
                server_budget,
                high_capable: (0..num_clients).collect(),
            })
        }
    }
}

/// Per-round cost bookkeeping for one run.
#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    rounds: Vec<RoundCostEntry>,
    cumulative_total: u64,
    cumulative_normalized: f64,
}

#[derive(Debug, Clone)]
pub struct RoundCostEntry {
    pub per_client: BTreeMap<usize, u64>,
    pub server_total: u64,
    pub normalized: f64,
}

impl CostLedger {
    pub fn new() -> Self {
        CostLedger::default()
    }

    /// Record a finished round. `per_client` must already sum to the server
    /// total (the entry is the audit trail for that identity).
    pub fn record_round(
        &mut self,
        per_client: BTreeMap<usize, u64>,
        updates_per_round: u32,
        model_size: usize,
        active_count: usize,
    ) -> &RoundCostEntry {
        let server_total: u64 = per_client.values().sum();
        let normalized =
            normalized_cost(server_total, updates_per_round, model_size, active_count);
        self.cumulative_total += server_total;
        self.cumulative_normalized += normalized;
        self.rounds.push(RoundCostEntry { per_client, server_total, normalized });
        self.rounds.last().unwrap()
    }

    pub fn rounds(&self) -> &[RoundCostEntry] {
        &self.rounds
    }

    pub fn cumulative_total(&self) -> u64 {
        self.cumulative_total
    }

    pub fn cumulative_normalized(&self) -> f64 {
        self.cumulative_normalized
    }
}
