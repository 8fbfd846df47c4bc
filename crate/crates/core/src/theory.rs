//! Three-client quadratic analysis.
//!
//! For scalar mean estimation under quadratic loss, a round of the mixed
//! protocol (clients 1 and 2 stepping-and-averaging every update, client 3
//! running all k updates locally, everyone averaged at round end) contracts
//! the distance to the global optimum by exactly (1 - eta)^k, so after r
//! rounds the trajectory coincides with k*r steps of synchronized
//! single-step aggregation. This module evaluates the closed form, drives
//! the real engine through the mixed protocol, simulates the synchronized
//! baseline step by step, and compares all three over a grid.

use std::collections::BTreeSet;

use crate::comms::BudgetMode;
use crate::datastats::{ClientDataset, Dataset};
use crate::engine::{
    weighted_average, BudgetSpec, Participation, RoundLength, SelectionMethod, Simulation,
    TrainingConfig,
};
use crate::error::{Error, Result};
use crate::models::{
    loss_and_grad, Batch, ModelParams, Objective, OptimizerConfig, Schedule,
};
use crate::seeding;
use rand::Rng;

/// Three clients' scalar observations plus the protocol shape.
#[derive(Debug, Clone)]
pub struct QuadraticScenario {
    pub observations: [Vec<f64>; 3],
    pub initial: f64,
    /// Learning rate eta in (0, 1].
    pub learning_rate: f64,
    /// High-frequency local steps per round (k).
    pub local_steps: u32,
    /// Rounds (r).
    pub rounds: u32,
}

impl QuadraticScenario {
    pub fn validate(&self) -> Result<()> {
        if self.observations.iter().any(Vec::is_empty) {
            return Err(Error::validation("every client needs at least one observation"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::validation(format!(
                "learning rate {} outside (0, 1]",
                self.learning_rate
            )));
        }
        if self.local_steps == 0 || self.rounds == 0 {
            return Err(Error::validation("local_steps and rounds must be positive"));
        }
        if self.local_steps > 256 {
            return Err(Error::validation("local_steps above 256 exceed the longest interval"));
        }
        Ok(())
    }

    /// Per-client sample means.
    pub fn means(&self) -> [f64; 3] {
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        [mean(&self.observations[0]), mean(&self.observations[1]), mean(&self.observations[2])]
    }

    /// Data-proportional aggregation weights.
    pub fn weights(&self) -> [f64; 3] {
        let n: usize = self.observations.iter().map(Vec::len).sum();
        let w = |v: &Vec<f64>| v.len() as f64 / n as f64;
        [w(&self.observations[0]), w(&self.observations[1]), w(&self.observations[2])]
    }

    /// Global minimizer: the weighted mean of means.
    pub fn optimum(&self) -> f64 {
        let means = self.means();
        let weights = self.weights();
        means.iter().zip(&weights).map(|(m, w)| m * w).sum()
    }

    fn max_client_size(&self) -> usize {
        self.observations.iter().map(Vec::len).max().unwrap()
    }
}

/// Closed-form model value after all rounds:
/// optimum + (1 - eta)^(k*r) * (initial - optimum).
pub fn closed_form(scenario: &QuadraticScenario) -> f64 {
    let contraction = (1.0 - scenario.learning_rate)
        .powi((scenario.local_steps * scenario.rounds) as i32);
    scenario.optimum() + contraction * (scenario.initial - scenario.optimum())
}

/// Closed form truncated to `rounds_done` rounds.
pub fn closed_form_at(scenario: &QuadraticScenario, rounds_done: u32) -> f64 {
    let contraction =
        (1.0 - scenario.learning_rate).powi((scenario.local_steps * rounds_done) as i32);
    scenario.optimum() + contraction * (scenario.initial - scenario.optimum())
}

fn scenario_clients(scenario: &QuadraticScenario) -> Result<Vec<ClientDataset>> {
    scenario
        .observations
        .iter()
        .enumerate()
        .map(|(i, obs)| {
            let data = Dataset::new(obs.clone(), vec![0; obs.len()], 1, 1)?;
            ClientDataset::new(i, data)
        })
        .collect()
}

fn scenario_optimizer(scenario: &QuadraticScenario) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: scenario.learning_rate,
        momentum: 0.0,
        weight_decay: 0.0,
        schedule: Schedule::Constant,
        batch_size: scenario.max_client_size(),
    }
}

/// Drive the engine through the mixed protocol: clients 0 and 1 sync every
/// update, client 2 only at the round boundary. Returns the global model
/// after each round.
pub fn simulate_dynamicfl_quadratic(scenario: &QuadraticScenario) -> Result<Vec<f64>> {
    scenario.validate()?;
    let clients = scenario_clients(scenario)?;
    let config = TrainingConfig {
        rounds: scenario.rounds,
        active_fraction: 1.0,
        round_length: RoundLength::ExplicitUpdates(scenario.local_steps),
        high_level: crate::comms::IntervalLevel::A,
        low_level: crate::comms::IntervalLevel::G,
        budget: BudgetSpec { mode: BudgetMode::Dynamic, beta: 1.0 },
        selection: SelectionMethod::Dynacomm,
        random_fraction: 0.0,
        participation: Participation::All,
        ens_times: 1,
        seed: 0,
        threads: 1,
        eval_every: 1,
        forced_high_subset: Some(BTreeSet::from([0, 1])),
    };
    let objective = Objective::QuadraticMean;
    let sim = Simulation::new(config, objective, scenario_optimizer(scenario), &clients)?;
    let start = ModelParams::new(vec![scenario.initial], objective.layout())?;
    let mut state = sim.state_from(start);
    let mut trajectory = Vec::with_capacity(scenario.rounds as usize);
    for t in 1..=scenario.rounds {
        sim.run_round(&mut state, t)?;
        trajectory.push(state.global_params.values[0]);
    }
    Ok(trajectory)
}

/// Simulate the synchronized baseline: at every system-wide step, each
/// client takes one full-batch gradient step from the shared model and the
/// results are averaged by data size. Returns the model after each step.
pub fn simulate_fedsgd_quadratic(scenario: &QuadraticScenario) -> Result<Vec<f64>> {
    scenario.validate()?;
    let clients = scenario_clients(scenario)?;
    let objective = Objective::QuadraticMean;
    let optimizer = scenario_optimizer(scenario);
    let layout = objective.layout();
    let mut theta = scenario.initial;
    let steps = scenario.local_steps * scenario.rounds;
    let mut trajectory = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let shared = ModelParams::new(vec![theta], layout.clone())?;
        let mut stepped: Vec<ModelParams> = Vec::with_capacity(3);
        for client in &clients {
            let batch = Batch { data: &client.data, indices: (0..client.len()).collect() };
            let (_, grad) = loss_and_grad(&objective, &shared, &batch)?;
            let mut local = shared.clone();
            local.values[0] -= optimizer.learning_rate * grad[0];
            stepped.push(local);
        }
        let entries: Vec<(&ModelParams, f64)> = stepped
            .iter()
            .zip(&clients)
            .map(|(params, client)| (params, client.len() as f64))
            .collect();
        theta = weighted_average(&entries)?.values[0];
        trajectory.push(theta);
    }
    Ok(trajectory)
}

/// Outcome of the default verification grid.
#[derive(Debug, Clone)]
pub struct GridReport {
    pub cases: usize,
    pub max_closed_form_deviation: f64,
    pub max_cross_deviation: f64,
    pub tolerance: f64,
    pub worst_case: String,
    pub pass: bool,
}

/// Run the full verification grid: learning rates {0.1, 0.5, 0.9}, local
/// steps {1, 2, 5}, rounds {1, 3, 10}, `scenarios_per_cell` random data
/// draws each. Every round's engine value is compared against the closed
/// form and against the synchronized baseline at the matching step count.
pub fn theorem_grid(scenarios_per_cell: usize, tolerance: f64) -> Result<GridReport> {
    let mut cases = 0;
    let mut max_closed: f64 = 0.0;
    let mut max_cross: f64 = 0.0;
    let mut worst = String::from("none");
    for &eta in &[0.1, 0.5, 0.9] {
        for &k in &[1u32, 2, 5] {
            for &r in &[1u32, 3, 10] {
                for draw in 0..scenarios_per_cell {
                    let scenario = random_scenario(eta, k, r, draw as u64);
                    let dynamic = simulate_dynamicfl_quadratic(&scenario)?;
                    let fedsgd = simulate_fedsgd_quadratic(&scenario)?;
                    cases += 1;
                    for t in 1..=r {
                        let closed = closed_form_at(&scenario, t);
                        let dev_closed = (dynamic[(t - 1) as usize] - closed).abs();
                        let dev_cross = (dynamic[(t - 1) as usize]
                            - fedsgd[(k * t - 1) as usize])
                            .abs();
                        if dev_closed > max_closed || dev_cross > max_cross {
                            worst = format!(
                                "eta={eta} k={k} r={t} draw={draw} closed_dev={dev_closed:.3e} cross_dev={dev_cross:.3e}"
                            );
                        }
                        max_closed = max_closed.max(dev_closed);
                        max_cross = max_cross.max(dev_cross);
                    }
                }
            }
        }
    }
    let pass = max_closed <= tolerance && max_cross <= tolerance;
    Ok(GridReport {
        cases,
        max_closed_form_deviation: max_closed,
        max_cross_deviation: max_cross,
        tolerance,
        worst_case: worst,
        pass,
    })
}

/// A randomized scenario for the verification grid.
pub fn random_scenario(eta: f64, k: u32, r: u32, draw: u64) -> QuadraticScenario {
    let mut rng = seeding::stream(draw, "theory-grid", &[k.into(), r.into()]);
    let mut obs = || {
        let n = rng.gen_range(1..=8usize);
        (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect::<Vec<f64>>()
    };
    let observations = [obs(), obs(), obs()];
    let initial = rng.gen_range(-5.0..5.0);
    QuadraticScenario { observations, initial, learning_rate: eta, local_steps: k, rounds: r }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_scenario() -> QuadraticScenario {
        QuadraticScenario {
            observations: [vec![1.0, 3.0], vec![-2.0], vec![4.0, 4.0, 1.0]],
            initial: 1.0,
            learning_rate: 0.5,
            local_steps: 2,
            rounds: 3,
        }
    }

    #[test]
    fn closed_form_examples() {
        let mut s = toy_scenario();
        s.learning_rate = 1.0;
        assert_eq!(closed_form(&s), s.optimum());

        let mut fixed = toy_scenario();
        fixed.initial = fixed.optimum();
        assert!((closed_form(&fixed) - fixed.optimum()).abs() < 1e-15);

        // Handmade case: optimum 0, contraction 0.5^6.
        let unit = QuadraticScenario {
            observations: [vec![0.0], vec![0.0], vec![0.0]],
            initial: 1.0,
            learning_rate: 0.5,
            local_steps: 2,
            rounds: 3,
        };
        assert_eq!(closed_form(&unit), 0.015625);
        let sim = simulate_dynamicfl_quadratic(&unit).unwrap();
        assert!((sim[2] - 0.015625).abs() < 1e-14);
    }

    #[test]
    fn engine_round_matches_single_round_recursion() {
        let mut s = toy_scenario();
        s.rounds = 1;
        let sim = simulate_dynamicfl_quadratic(&s).unwrap();
        let contraction = (1.0 - s.learning_rate).powi(s.local_steps as i32);
        let expect = s.optimum() + contraction * (s.initial - s.optimum());
        assert!((sim[0] - expect).abs() < 1e-12, "{} vs {expect}", sim[0]);
    }

    #[test]
    fn trajectory_matches_closed_form_every_round() {
        let s = toy_scenario();
        let sim = simulate_dynamicfl_quadratic(&s).unwrap();
        for t in 1..=s.rounds {
            let expect = closed_form_at(&s, t);
            assert!(
                (sim[(t - 1) as usize] - expect).abs() < 1e-12,
                "round {t}: {} vs {expect}",
                sim[(t - 1) as usize]
            );
        }
    }

    #[test]
    fn geometric_contraction_per_round() {
        let s = toy_scenario();
        let sim = simulate_dynamicfl_quadratic(&s).unwrap();
        let opt = s.optimum();
        let factor = (1.0 - s.learning_rate).powi(s.local_steps as i32);
        let mut prev = s.initial;
        for &theta in &sim {
            assert!((theta - opt).abs() - factor * (prev - opt).abs() < 1e-12);
            prev = theta;
        }
    }

    #[test]
    fn fedsgd_one_step_with_unit_rate_hits_optimum() {
        let mut s = toy_scenario();
        s.learning_rate = 1.0;
        s.local_steps = 1;
        s.rounds = 1;
        let traj = simulate_fedsgd_quadratic(&s).unwrap();
        assert!((traj[0] - s.optimum()).abs() < 1e-14);
    }

    #[test]
    fn fedsgd_and_dynamic_agree_at_round_boundaries() {
        let s = toy_scenario();
        let dynamic = simulate_dynamicfl_quadratic(&s).unwrap();
        let fedsgd = simulate_fedsgd_quadratic(&s).unwrap();
        for t in 1..=s.rounds {
            let a = dynamic[(t - 1) as usize];
            let b = fedsgd[(s.local_steps * t - 1) as usize];
            assert!((a - b).abs() < 1e-10, "round {t}: {a} vs {b}");
        }
        assert!((fedsgd.last().unwrap() - closed_form(&s)).abs() < 1e-12);
    }

    #[test]
    fn homogeneous_data_reduces_to_single_client_sgd() {
        let s = QuadraticScenario {
            observations: [vec![2.0, 4.0], vec![3.0, 3.0], vec![1.0, 5.0]],
            initial: -2.0,
            learning_rate: 0.3,
            local_steps: 3,
            rounds: 4,
        };
        // All client means equal 3.0.
        let sim = simulate_dynamicfl_quadratic(&s).unwrap();
        let mut theta = s.initial;
        for t in 1..=s.rounds {
            for _ in 0..s.local_steps {
                theta -= s.learning_rate * (theta - 3.0);
            }
            assert!((sim[(t - 1) as usize] - theta).abs() < 1e-12, "round {t}");
        }
    }

    #[test]
    fn grid_passes_at_tight_tolerance() {
        let report = theorem_grid(3, 1e-10).unwrap();
        assert!(report.pass, "worst case: {}", report.worst_case);
        assert_eq!(report.cases, 27 * 3);
    }

    #[test]
    fn scenario_validation() {
        let mut s = toy_scenario();
        s.learning_rate = 1.5;
        assert!(s.validate().is_err());
        s.learning_rate = 0.5;
        s.observations[1].clear();
        assert!(s.validate().is_err());
    }
}
