//! Budget-constrained selection of the high-frequency client subset.
//!
//! Given the active clients' label distributions and transfer budgets, pick
//! the subset whose joint label distribution has minimum KL divergence to
//! the global distribution, such that every member can afford a
//! high-frequency round and the whole round (members at high frequency,
//! everyone else at low) fits the server budget.
//!
//! The production selector is an ensemble of shuffled dynamic-programming
//! passes over a (n+1) x (n+1) matrix whose cell (i, j) holds the best known
//! j-element subset among the first i shuffled candidates. A brute-force
//! enumerator serves as the exact oracle for small instances, with genetic
//! and random selectors as baselines.

use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};

use crate::datastats::{joint_distribution, kl_divergence, LabelDistribution};
use crate::error::{Error, Result};
use crate::seeding;

/// One selectable client: its label statistics and what a high-frequency
/// round would cost it.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub client_id: usize,
    pub dist: LabelDistribution,
    /// Transfer cost of one round at the high frequency.
    pub high_freq_cost: u64,
    /// The client's per-round budget tau_m.
    pub budget: u64,
}

/// A single round's selection instance.
#[derive(Debug, Clone)]
pub struct SelectionProblem {
    candidates: Vec<Candidate>,
    /// Transfer cost of one round at the low frequency (uniform across
    /// clients); enters the server-budget check for non-members.
    low_freq_cost: u64,
    server_budget: u64,
    global_dist: LabelDistribution,
    ens_times: u32,
    seed: u64,
    by_id: BTreeMap<usize, usize>,
}

impl SelectionProblem {
    pub fn new(
        candidates: Vec<Candidate>,
        low_freq_cost: u64,
        server_budget: u64,
        global_dist: LabelDistribution,
        ens_times: u32,
        seed: u64,
    ) -> Result<Self> {
        if global_dist.is_empty() {
            return Err(Error::validation("global distribution must be nonempty"));
        }
        if ens_times == 0 {
            return Err(Error::validation("ens_times must be at least 1"));
        }
        let mut by_id = BTreeMap::new();
        for (i, c) in candidates.iter().enumerate() {
            if c.dist.num_classes() != global_dist.num_classes() {
                return Err(Error::validation(format!(
                    "candidate {} has {} classes, global has {}",
                    c.client_id,
                    c.dist.num_classes(),
                    global_dist.num_classes()
                )));
            }
            if c.dist.is_empty() {
                return Err(Error::validation(format!(
                    "candidate {} has an empty label distribution",
                    c.client_id
                )));
            }
            if by_id.insert(c.client_id, i).is_some() {
                return Err(Error::validation(format!("duplicate candidate id {}", c.client_id)));
            }
        }
        Ok(SelectionProblem { candidates, low_freq_cost, server_budget, global_dist, ens_times, seed, by_id })
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn global_dist(&self) -> &LabelDistribution {
        &self.global_dist
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ens_times(&self) -> u32 {
        self.ens_times
    }

    fn candidate(&self, client_id: usize) -> &Candidate {
        &self.candidates[self.by_id[&client_id]]
    }

    /// KL divergence of a subset's joint label distribution to the global
    /// one, evaluated in canonical (ascending client id) order so that every
    /// selector computes bit-identical values for the same subset.
    pub fn subset_kl(&self, subset: &BTreeSet<usize>) -> f64 {
        if subset.is_empty() {
            return f64::INFINITY;
        }
        let members: Vec<LabelDistribution> =
            subset.iter().map(|&id| self.candidate(id).dist.clone()).collect();
        let joint = joint_distribution(&members).expect("validated members");
        kl_divergence(&joint, &self.global_dist).expect("validated classes")
    }

    /// Server cost of a round if `subset` runs high frequency and the other
    /// candidates run low frequency.
    pub fn server_cost(&self, subset: &BTreeSet<usize>) -> u64 {
        let high: u64 = subset.iter().map(|&id| self.candidate(id).high_freq_cost).sum();
        let low = (self.candidates.len() - subset.len()) as u64 * self.low_freq_cost;
        high + low
    }

    /// Whether every member affords high frequency and the round fits the
    /// server budget.
    pub fn is_feasible(&self, subset: &BTreeSet<usize>) -> bool {
        subset.iter().all(|&id| {
            let c = self.candidate(id);
            c.high_freq_cost <= c.budget
        }) && self.server_cost(subset) <= self.server_budget
    }
}

/// One cell of the selection matrix: the best known subset of a given
/// cardinality, or the infinite sentinel when none is known.
#[derive(Debug, Clone)]
pub struct SelectionCell {
    pub kl: f64,
    pub clients: BTreeSet<usize>,
}

impl Default for SelectionCell {
    fn default() -> Self {
        SelectionCell { kl: f64::INFINITY, clients: BTreeSet::new() }
    }
}

/// Outcome of a selection: the chosen subset (possibly empty) and its score.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub subset: BTreeSet<usize>,
    pub kl: f64,
    pub feasible: bool,
    pub server_cost_if_adopted: u64,
}

impl SelectionResult {
    fn from_subset(problem: &SelectionProblem, subset: BTreeSet<usize>, kl: f64) -> Self {
        // Every selector funnels through here; the feasibility contract is a
        // hard assertion, not a debug-only one.
        assert!(problem.is_feasible(&subset), "selector produced an infeasible subset");
        let server_cost_if_adopted = problem.server_cost(&subset);
        SelectionResult { subset, kl, feasible: true, server_cost_if_adopted }
    }

    fn empty(problem: &SelectionProblem) -> Self {
        Self::from_subset(problem, BTreeSet::new(), f64::INFINITY)
    }
}

struct DpOutcome {
    best: SelectionCell,
    /// Best feasible KL per exact cardinality, indexed 1..=n (entry 0 unused).
    per_size: Vec<f64>,
}

/// The ensemble dynamic program shared by `dynacomm_select` and `kl_curve`.
fn ensemble_dp(problem: &SelectionProblem) -> DpOutcome {
    let n = problem.candidates.len();
    let mut best = SelectionCell::default();
    let mut per_size = vec![f64::INFINITY; n + 1];
    for pass in 0..problem.ens_times {
        let mut order: Vec<usize> = problem.candidates.iter().map(|c| c.client_id).collect();
        order.sort_unstable();
        let mut rng = seeding::stream(problem.seed, "dynacomm-pass", &[u64::from(pass)]);
        order.shuffle(&mut rng);

        let mut cells: Vec<Vec<SelectionCell>> =
            vec![vec![SelectionCell::default(); n + 1]; n + 1];
        for i in 1..=n {
            for j in 1..=n {
                if i < j {
                    continue;
                }
                cells[i][j] = cells[i - 1][j].clone();
                let incoming = order[i - 1];
                let mut subset = cells[i - 1][j - 1].clients.clone();
                subset.insert(incoming);

                let cand = problem.candidate(incoming);
                if cand.high_freq_cost > cand.budget
                    || problem.server_cost(&subset) > problem.server_budget
                {
                    continue;
                }
                let kl = problem.subset_kl(&subset);
                if kl < per_size[subset.len()] {
                    per_size[subset.len()] = kl;
                }
                if kl < cells[i][j].kl && subset.len() == j {
                    cells[i][j] = SelectionCell { kl, clients: subset.clone() };
                }
                if kl < best.kl {
                    best = SelectionCell { kl, clients: subset };
                }
            }
        }
    }
    DpOutcome { best, per_size }
}

/// Ensemble shuffled-DP selector.
///
/// Runs `ens_times` independent passes over seeded shuffles of the
/// candidates; each pass grows subsets cell by cell, skipping extensions
/// that break the incoming client's own budget or the server budget, and the
/// best feasible subset seen anywhere wins. When nothing feasible exists the
/// empty subset is returned (the caller falls back to all-low frequency).
pub fn dynacomm_select(problem: &SelectionProblem) -> SelectionResult {
    let outcome = ensemble_dp(problem);
    if outcome.best.clients.is_empty() {
        SelectionResult::empty(problem)
    } else {
        SelectionResult::from_subset(problem, outcome.best.clients, outcome.best.kl)
    }
}

const BRUTE_FORCE_LIMIT: usize = 20;

/// Exhaustive enumeration over the non-empty power set.
///
/// Ties break toward smaller subsets, then lexicographically smaller client
/// id sets. Guarded to 20 candidates.
pub fn brute_force_select(problem: &SelectionProblem) -> Result<SelectionResult> {
    let n = problem.candidates.len();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::capacity(format!(
            "brute force supports at most {BRUTE_FORCE_LIMIT} candidates, got {n}"
        )));
    }
    let mut ids: Vec<usize> = problem.candidates.iter().map(|c| c.client_id).collect();
    ids.sort_unstable();
    let mut best: Option<(f64, BTreeSet<usize>)> = None;
    for mask in 1u32..(1u32 << n) {
        let subset: BTreeSet<usize> = (0..n)
            .filter(|b| mask & (1 << b) != 0)
            .map(|b| ids[b])
            .collect();
        if !problem.is_feasible(&subset) {
            continue;
        }
        let kl = problem.subset_kl(&subset);
        let better = match &best {
            None => true,
            Some((bkl, bset)) => {
                kl < *bkl
                    || (kl == *bkl
                        && (subset.len() < bset.len()
                            || (subset.len() == bset.len()
                                && subset.iter().lt(bset.iter()))))
            }
        };
        if better {
            best = Some((kl, subset));
        }
    }
    Ok(match best {
        Some((kl, subset)) => SelectionResult::from_subset(problem, subset, kl),
        None => SelectionResult::empty(problem),
    })
}

/// Genetic-algorithm baseline configuration.
#[derive(Debug, Clone)]
pub struct GeneticParams {
    pub population: usize,
    pub max_iters: usize,
    pub mutation_prob: f64,
}

impl Default for GeneticParams {
    fn default() -> Self {
        GeneticParams { population: 50, max_iters: 200, mutation_prob: 0.01 }
    }
}

/// Genetic-algorithm baseline: bitstring subsets, tournament selection of
/// size 3, uniform crossover, per-bit mutation. Infeasible or empty subsets
/// score infinite; the best feasible individual ever seen is returned.
pub fn genetic_select(problem: &SelectionProblem, params: &GeneticParams) -> SelectionResult {
    let n = problem.candidates.len();
    if n == 0 {
        return SelectionResult::empty(problem);
    }
    let mut ids: Vec<usize> = problem.candidates.iter().map(|c| c.client_id).collect();
    ids.sort_unstable();
    let mut rng = seeding::stream(problem.seed, "genetic", &[]);

    let decode = |bits: &[bool]| -> BTreeSet<usize> {
        bits.iter()
            .enumerate()
            .filter(|&(_, &on)| on)
            .map(|(b, _)| ids[b])
            .collect()
    };
    let mut best: Option<(f64, BTreeSet<usize>)> = None;
    let score = |bits: &[bool], best: &mut Option<(f64, BTreeSet<usize>)>| -> f64 {
        let subset = decode(bits);
        if subset.is_empty() || !problem.is_feasible(&subset) {
            return f64::INFINITY;
        }
        let kl = problem.subset_kl(&subset);
        if best.as_ref().map_or(true, |(bkl, _)| kl < *bkl) {
            *best = Some((kl, subset));
        }
        kl
    };

    let mut population: Vec<Vec<bool>> =
        (0..params.population).map(|_| (0..n).map(|_| rng.gen::<bool>()).collect()).collect();
    let mut fitness: Vec<f64> =
        population.iter().map(|bits| score(bits, &mut best)).collect();

    for _ in 0..params.max_iters {
        let mut next = Vec::with_capacity(params.population);
        for _ in 0..params.population {
            let tournament = |rng: &mut rand_chacha::ChaCha12Rng| -> usize {
                let mut pick = rng.gen_range(0..params.population);
                for _ in 0..2 {
                    let other = rng.gen_range(0..params.population);
                    if fitness[other] < fitness[pick] {
                        pick = other;
                    }
                }
                pick
            };
            let a = tournament(&mut rng);
            let b = tournament(&mut rng);
            let child: Vec<bool> = (0..n)
                .map(|bit| {
                    let from_a = rng.gen::<bool>();
                    let mut v = if from_a { population[a][bit] } else { population[b][bit] };
                    if rng.gen::<f64>() < params.mutation_prob {
                        v = !v;
                    }
                    v
                })
                .collect();
            next.push(child);
        }
        population = next;
        fitness = population.iter().map(|bits| score(bits, &mut best)).collect();
    }

    match best {
        Some((kl, subset)) => SelectionResult::from_subset(problem, subset, kl),
        None => SelectionResult::empty(problem),
    }
}

const RANDOM_RETRY_LIMIT: usize = 100;

/// Random baseline: a uniform subset of the individually affordable
/// candidates at the requested size, re-drawn (then truncated) until the
/// server budget holds.
pub fn random_select(
    problem: &SelectionProblem,
    target_fraction: f64,
    seed: u64,
) -> Result<SelectionResult> {
    if !(0.0..=1.0).contains(&target_fraction) {
        return Err(Error::validation(format!(
            "target_fraction {target_fraction} outside [0, 1]"
        )));
    }
    let n = problem.candidates.len();
    let mut eligible: Vec<usize> = problem
        .candidates
        .iter()
        .filter(|c| c.high_freq_cost <= c.budget)
        .map(|c| c.client_id)
        .collect();
    eligible.sort_unstable();
    let want = ((target_fraction * n as f64).floor() as usize).min(eligible.len());
    if want == 0 {
        return Ok(SelectionResult::empty(problem));
    }
    let mut rng = seeding::stream(seed, "random-select", &[]);
    let mut draw: Vec<usize> = Vec::new();
    for _ in 0..RANDOM_RETRY_LIMIT {
        draw = eligible.choose_multiple(&mut rng, want).copied().collect();
        let subset: BTreeSet<usize> = draw.iter().copied().collect();
        if problem.server_cost(&subset) <= problem.server_budget {
            let kl = problem.subset_kl(&subset);
            return Ok(SelectionResult::from_subset(problem, subset, kl));
        }
    }
    // Give up on re-drawing; shrink the last draw until it fits.
    while !draw.is_empty() {
        draw.pop();
        let subset: BTreeSet<usize> = draw.iter().copied().collect();
        if problem.server_cost(&subset) <= problem.server_budget {
            let kl = problem.subset_kl(&subset);
            return Ok(SelectionResult::from_subset(problem, subset, kl));
        }
    }
    Ok(SelectionResult::empty(problem))
}

/// Best feasible KL at each exact subset cardinality 1..=max_size.
///
/// Exact (brute-force) up to 20 candidates, ensemble-DP cells beyond.
pub fn kl_curve(problem: &SelectionProblem, max_size: usize) -> Vec<(usize, f64)> {
    let n = problem.candidates.len();
    let mut per_size = vec![f64::INFINITY; n + 1];
    if n <= BRUTE_FORCE_LIMIT {
        let mut ids: Vec<usize> = problem.candidates.iter().map(|c| c.client_id).collect();
        ids.sort_unstable();
        for mask in 1u32..(1u32 << n) {
            let subset: BTreeSet<usize> = (0..n)
                .filter(|b| mask & (1 << b) != 0)
                .map(|b| ids[b])
                .collect();
            if !problem.is_feasible(&subset) {
                continue;
            }
            let kl = problem.subset_kl(&subset);
            if kl < per_size[subset.len()] {
                per_size[subset.len()] = kl;
            }
        }
    } else {
        per_size = ensemble_dp(problem).per_size;
    }
    (1..=max_size)
        .map(|s| (s, per_size.get(s).copied().unwrap_or(f64::INFINITY)))
        .collect()
}

/// Seeded heterogeneous selection instance for benchmarks and verification:
/// a balanced `num_classes`-class label pool split across `num_candidates`
/// clients by a spiky Dirichlet draw (alpha 0.1), with randomized per-client
/// budgets and a server budget that admits only part of the candidates at
/// high frequency.
pub fn synthetic_problem(
    num_candidates: usize,
    num_classes: usize,
    seed: u64,
) -> Result<SelectionProblem> {
    use crate::datastats::{empirical_distribution, partition, Dataset, PartitionMode, PartitionSpec};
    let per_class = 100usize;
    let labels: Vec<usize> =
        (0..num_classes).flat_map(|c| std::iter::repeat(c).take(per_class)).collect();
    let features = vec![0.0; labels.len()];
    let pool = Dataset::new(features, labels, 1, num_classes)?;
    let clients = partition(
        &pool,
        &PartitionSpec {
            mode: PartitionMode::Dirichlet { alpha: 0.1 },
            num_clients: num_candidates,
            seed: seeding::stream_seed(seed, "bench-partition", &[]),
        },
    )?;
    let mut rng = seeding::stream(seed, "bench-budgets", &[]);
    let high_cost = 10u64;
    let low_cost = 1u64;
    let candidates: Vec<Candidate> = clients
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| Candidate {
            client_id: c.client_id,
            dist: c.label_dist.clone(),
            high_freq_cost: high_cost,
            // Roughly two thirds of the clients can afford high frequency.
            budget: if rng.gen::<f64>() < 0.7 { high_cost } else { low_cost },
        })
        .collect();
    let n = candidates.len() as u64;
    let admitted = rng.gen_range(2..=6u64).min(n);
    let server_budget = admitted * high_cost + (n - admitted) * low_cost;
    let global = empirical_distribution(pool.labels(), num_classes)?;
    SelectionProblem::new(candidates, low_cost, server_budget, global, 4, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastats::empirical_distribution;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// A candidate holding `count` samples spread over the listed classes
    /// (equally), for simple hand-built instances.
    fn candidate(
        client_id: usize,
        classes: &[usize],
        count: usize,
        num_classes: usize,
        high_cost: u64,
        budget: u64,
    ) -> Candidate {
        let labels: Vec<usize> = (0..count).map(|i| classes[i % classes.len()]).collect();
        Candidate {
            client_id,
            dist: empirical_distribution(&labels, num_classes).unwrap(),
            high_freq_cost: high_cost,
            budget,
        }
    }

    fn uniform_global(num_classes: usize, count: usize) -> LabelDistribution {
        let labels: Vec<usize> = (0..count).map(|i| i % num_classes).collect();
        empirical_distribution(&labels, num_classes).unwrap()
    }

    fn one_hot_cover_problem(c: usize, budget: u64) -> SelectionProblem {
        let candidates: Vec<Candidate> =
            (0..c).map(|m| candidate(m, &[m], 100, c, 10, budget)).collect();
        SelectionProblem::new(candidates, 1, u64::MAX, uniform_global(c, 100 * c), 4, 7).unwrap()
    }

    /// Independent slow enumeration used as the second oracle; written
    /// against the problem's public surface only.
    fn exhaustive_reference(problem: &SelectionProblem) -> (f64, BTreeSet<usize>) {
        let ids: Vec<usize> = problem.candidates().iter().map(|c| c.client_id).collect();
        let n = ids.len();
        let mut best_kl = f64::INFINITY;
        let mut best_set = BTreeSet::new();
        for mask in 1u64..(1 << n) {
            let subset: BTreeSet<usize> =
                (0..n).filter(|b| mask & (1 << b) != 0).map(|b| ids[b]).collect();
            if !problem.is_feasible(&subset) {
                continue;
            }
            let kl = problem.subset_kl(&subset);
            if kl < best_kl {
                best_kl = kl;
                best_set = subset;
            }
        }
        (best_kl, best_set)
    }

    fn random_problem(seed: u64, n: usize, num_classes: usize) -> SelectionProblem {
        let mut rng = crate::seeding::stream(seed, "test-problem", &[]);
        let mut global_labels = Vec::new();
        let candidates: Vec<Candidate> = (0..n)
            .map(|m| {
                // One-hot-heavy: most clients hold one class, some hold two.
                let main = rng.gen_range(0..num_classes);
                let classes: Vec<usize> = if rng.gen::<f64>() < 0.3 {
                    vec![main, rng.gen_range(0..num_classes)]
                } else {
                    vec![main]
                };
                let count = rng.gen_range(20..200usize);
                let labels: Vec<usize> =
                    (0..count).map(|i| classes[i % classes.len()]).collect();
                global_labels.extend_from_slice(&labels);
                let budget = if rng.gen::<f64>() < 0.7 { 10 } else { 5 };
                Candidate {
                    client_id: m,
                    dist: empirical_distribution(&labels, num_classes).unwrap(),
                    high_freq_cost: 10,
                    budget,
                }
            })
            .collect();
        let global = empirical_distribution(&global_labels, num_classes).unwrap();
        let server_budget = rng.gen_range(3..=10u64) * 10 + (n as u64);
        SelectionProblem::new(candidates, 1, server_budget, global, 4, seed).unwrap()
    }

    #[test]
    fn dynacomm_finds_exact_cover() {
        let problem = one_hot_cover_problem(3, 100);
        let result = dynacomm_select(&problem);
        assert_eq!(result.subset, (0..3).collect());
        assert_eq!(result.kl, 0.0);
    }

    #[test]
    fn dynacomm_all_zero_budgets_returns_empty() {
        let problem = one_hot_cover_problem(3, 0);
        let result = dynacomm_select(&problem);
        assert!(result.subset.is_empty());
        assert!(result.kl.is_infinite());
        assert!(result.feasible);
    }

    #[test]
    fn dynacomm_bounded_by_oracle_and_singletons() {
        for seed in 0..20u64 {
            let problem = random_problem(seed, 8, 4);
            let dyn_result = dynacomm_select(&problem);
            let brute = brute_force_select(&problem).unwrap();
            assert!(
                brute.kl <= dyn_result.kl,
                "seed {seed}: brute {} > dynacomm {}",
                brute.kl,
                dyn_result.kl
            );
            let best_singleton = problem
                .candidates()
                .iter()
                .filter(|c| {
                    let s: BTreeSet<usize> = [c.client_id].into();
                    problem.is_feasible(&s)
                })
                .map(|c| problem.subset_kl(&[c.client_id].into()))
                .fold(f64::INFINITY, f64::min);
            assert!(
                dyn_result.kl <= best_singleton,
                "seed {seed}: dynacomm {} > best singleton {}",
                dyn_result.kl,
                best_singleton
            );
        }
    }

    #[test]
    fn brute_force_single_candidate() {
        let candidates = vec![candidate(5, &[0], 10, 2, 3, 10)];
        let problem =
            SelectionProblem::new(candidates, 1, u64::MAX, uniform_global(2, 20), 2, 1).unwrap();
        let result = brute_force_select(&problem).unwrap();
        assert_eq!(result.subset, [5].into());
        let expect = problem.subset_kl(&[5].into());
        assert_eq!(result.kl, expect);
    }

    #[test]
    fn brute_force_all_infeasible() {
        let problem = one_hot_cover_problem(4, 0);
        let result = brute_force_select(&problem).unwrap();
        assert!(result.subset.is_empty());
        assert!(result.kl.is_infinite());
    }

    #[test]
    fn brute_force_matches_independent_enumeration() {
        for seed in 100..110u64 {
            let problem = random_problem(seed, 6, 4);
            let result = brute_force_select(&problem).unwrap();
            let (ref_kl, _) = exhaustive_reference(&problem);
            assert_eq!(result.kl, ref_kl, "seed {seed}");
        }
    }

    #[test]
    fn brute_force_capacity_guard() {
        let candidates: Vec<Candidate> =
            (0..21).map(|m| candidate(m, &[m % 3], 10, 3, 1, 10)).collect();
        let problem =
            SelectionProblem::new(candidates, 1, u64::MAX, uniform_global(3, 30), 2, 1).unwrap();
        assert!(matches!(brute_force_select(&problem), Err(Error::Capacity(_))));
    }

    #[test]
    fn genetic_finds_planted_optimum() {
        let problem = one_hot_cover_problem(4, 100);
        let result = genetic_select(&problem, &GeneticParams::default());
        assert_eq!(result.kl, 0.0);
        assert_eq!(result.subset, (0..4).collect());
    }

    #[test]
    fn genetic_all_infeasible_returns_empty() {
        let problem = one_hot_cover_problem(3, 0);
        let result = genetic_select(&problem, &GeneticParams::default());
        assert!(result.subset.is_empty());
        assert!(result.kl.is_infinite());
    }

    #[test]
    fn genetic_never_beats_brute_force() {
        let params = GeneticParams { population: 30, max_iters: 60, ..Default::default() };
        for seed in 200..212u64 {
            let problem = random_problem(seed, 10, 5);
            let ga = genetic_select(&problem, &params);
            let brute = brute_force_select(&problem).unwrap();
            assert!(brute.kl <= ga.kl, "seed {seed}: brute {} > ga {}", brute.kl, ga.kl);
        }
    }

    #[test]
    fn random_select_edges() {
        let problem = one_hot_cover_problem(5, 100);
        let empty = random_select(&problem, 0.0, 9).unwrap();
        assert!(empty.subset.is_empty());
        let full = random_select(&problem, 1.0, 9).unwrap();
        assert_eq!(full.subset, (0..5).collect());
        let a = random_select(&problem, 0.6, 42).unwrap();
        let b = random_select(&problem, 0.6, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_select_respects_server_budget() {
        // Server budget only admits two members at high frequency.
        let candidates: Vec<Candidate> =
            (0..6).map(|m| candidate(m, &[m], 50, 6, 10, 10)).collect();
        let problem =
            SelectionProblem::new(candidates, 1, 2 * 10 + 4, uniform_global(6, 300), 2, 3).unwrap();
        for seed in 0..30u64 {
            let r = random_select(&problem, 1.0, seed).unwrap();
            assert!(problem.is_feasible(&r.subset), "seed {seed}");
            assert!(r.subset.len() <= 2);
        }
    }

    #[test]
    fn kl_curve_planted_cover_reaches_zero() {
        let problem = one_hot_cover_problem(3, 100);
        let curve = kl_curve(&problem, 3);
        assert_eq!(curve.len(), 3);
        assert_eq!(curve[2], (3, 0.0));
        // Restriction bound: every size-restricted optimum dominates the
        // global optimum.
        let global_best = brute_force_select(&problem).unwrap().kl;
        for &(_, kl) in &curve {
            assert!(kl >= global_best);
        }
    }

    #[test]
    fn kl_curve_matches_log_ratio_closed_form() {
        // c one-hot clients with equal counts under a uniform global: the
        // best size-s subset is uniform over s classes, KL = ln(c/s).
        let c = 10;
        let problem = one_hot_cover_problem(c, 100);
        let curve = kl_curve(&problem, c);
        for &(s, kl) in &curve {
            let expect = (c as f64 / s as f64).ln();
            assert!(
                (kl - expect).abs() < 1e-12,
                "size {s}: got {kl}, closed form {expect}"
            );
        }
    }

    #[test]
    fn ensemble_monotone_in_passes() {
        for seed in 300..310u64 {
            let base = random_problem(seed, 9, 5);
            let mut last = f64::INFINITY;
            for ens in [1u32, 2, 4, 8] {
                let problem = SelectionProblem::new(
                    base.candidates().to_vec(),
                    base.low_freq_cost,
                    base.server_budget,
                    base.global_dist().clone(),
                    ens,
                    base.seed(),
                )
                .unwrap();
                let kl = dynacomm_select(&problem).kl;
                assert!(
                    kl <= last,
                    "seed {seed}: kl {kl} worsened from {last} when passes grew to {ens}"
                );
                last = kl;
            }
        }
    }

    #[test]
    fn selectors_deterministic_given_seed() {
        let problem = random_problem(77, 8, 4);
        assert_eq!(dynacomm_select(&problem), dynacomm_select(&problem));
        assert_eq!(
            genetic_select(&problem, &GeneticParams::default()),
            genetic_select(&problem, &GeneticParams::default())
        );
        assert_eq!(
            brute_force_select(&problem).unwrap(),
            brute_force_select(&problem).unwrap()
        );
        assert_eq!(
            random_select(&problem, 0.5, 5).unwrap(),
            random_select(&problem, 0.5, 5).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn prop_returned_subsets_feasible_and_oracle_dominated(seed in 0u64..10_000) {
            let problem = random_problem(seed, 7, 4);
            let dyn_result = dynacomm_select(&problem);
            let brute = brute_force_select(&problem).unwrap();
            let ga = genetic_select(
                &problem,
                &GeneticParams { population: 20, max_iters: 30, ..Default::default() },
            );
            let rnd = random_select(&problem, 0.5, seed).unwrap();
            for r in [&dyn_result, &brute, &ga, &rnd] {
                prop_assert!(problem.is_feasible(&r.subset));
            }
            prop_assert!(brute.kl <= dyn_result.kl);
            prop_assert!(brute.kl <= ga.kl);
            prop_assert!(brute.kl <= rnd.kl);
        }
    }
}
