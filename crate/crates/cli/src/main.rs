//! Experiment runner: configure a run, execute it, and emit plot-ready
//! metrics, plus verification and benchmarking subcommands.

mod config;

use anyhow::Context;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dynamicfl::datastats::kl_divergence;
use dynamicfl::dynacomm::{
    brute_force_select, dynacomm_select, genetic_select, kl_curve, random_select,
    synthetic_problem, GeneticParams,
};
use dynamicfl::engine::Simulation;
use dynamicfl::metrics::render_csv;
use dynamicfl::seeding;
use dynamicfl::theory::theorem_grid;

#[derive(Parser)]
#[command(name = "dynamicfl", version, about = "Federated communication-frequency simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config and write metrics files.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (0 = auto).
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Verify the three-client quadratic equivalence over the default grid.
    Theory {
        /// Random scenarios per grid cell.
        #[arg(long, default_value_t = 20)]
        scenarios: usize,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
    },
    /// Compare the selectors (exact, DP, genetic, random) on seeded
    /// instances and emit timing/KL tables.
    SelectorBench {
        #[arg(long, default_value_t = 10)]
        candidates: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Subset-size fraction for the random baseline.
        #[arg(long, default_value_t = 0.3)]
        random_fraction: f64,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Print per-client label histograms and KL-to-global for a config's
    /// partition.
    PartitionStats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Run { config, seed, out, threads } => cmd_run(&config, seed, out, threads),
        Command::Theory { scenarios, tolerance } => cmd_theory(scenarios, tolerance),
        Command::SelectorBench { candidates, trials, seed, classes, random_fraction, out } => {
            cmd_selector_bench(candidates, trials, seed, classes, random_fraction, &out)
        }
        Command::PartitionStats { config, seed } => cmd_partition_stats(&config, seed),
    }
}

fn cmd_run(
    config_path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
    threads: usize,
) -> anyhow::Result<i32> {
    let started = Instant::now();
    let mut config = config::parse_config(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    if let Some(out) = out_override {
        config.output.dir = out;
    }

    let (train, test) = config.build_datasets()?;
    let clients = config.build_clients(&train)?;
    let updates_per_round = config.updates_per_round(&clients);
    let objective = config.objective(&train);
    let optimizer = config.optimizer_config(updates_per_round);
    let training = config.training_config(updates_per_round, threads);
    let sim = Simulation::new(training, objective, optimizer, &clients)?;
    let output = sim.run_training(&test)?;

    let dir = &config.output.dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("metrics.csv"), render_csv(&output.metrics))?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&output.metrics)?)?;
    std::fs::write(dir.join("resolved_config.json"), serde_json::to_string_pretty(&config)?)?;

    let last = output.metrics.last();
    println!(
        "rounds={} updates_per_round={} total_updates={} final_loss={} final_accuracy={} out={}",
        config.training.rounds,
        updates_per_round,
        output.total_updates,
        last.map_or("n/a".into(), |m| format!("{:.6}", m.test_loss)),
        last.and_then(|m| m.test_accuracy).map_or("n/a".into(), |a| format!("{a:.4}")),
        dir.display(),
    );
    println!("completed in {} ms", started.elapsed().as_millis());
    Ok(0)
}

fn cmd_theory(scenarios: usize, tolerance: f64) -> anyhow::Result<i32> {
    let started = Instant::now();
    let report = theorem_grid(scenarios, tolerance)?;
    let max_abs = report.max_closed_form_deviation.max(report.max_cross_deviation);
    println!("cases={}", report.cases);
    println!("closed_form_deviation={:e}", report.max_closed_form_deviation);
    println!("cross_simulation_deviation={:e}", report.max_cross_deviation);
    println!("max_abs_deviation={max_abs:e}");
    println!("tolerance={:e}", report.tolerance);
    println!("elapsed_ms={}", started.elapsed().as_millis());
    if report.pass {
        println!("PASS");
        Ok(0)
    } else {
        println!("FAIL worst_case: {}", report.worst_case);
        Ok(1)
    }
}

fn cmd_selector_bench(
    candidates: usize,
    trials: usize,
    seed: u64,
    classes: usize,
    random_fraction: f64,
    out: &Path,
) -> anyhow::Result<i32> {
    std::fs::create_dir_all(out)?;
    let mut bench = String::from(
        "trial,candidates,brute_kl,brute_us,dynacomm_kl,dynacomm_us,genetic_kl,genetic_us,\
         random_kl,random_us,gap_dynacomm_minus_brute\n",
    );
    let mut curve = String::from("trial,size,best_kl\n");
    let mut dominated = 0usize;
    let mut gaps = Vec::new();
    let mut times = [0u128; 4];
    let fmt = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v}") };
    for trial in 0..trials {
        let problem =
            synthetic_problem(candidates, classes, seeding::stream_seed(seed, "bench", &[trial as u64]))?;

        let t0 = Instant::now();
        let brute = brute_force_select(&problem);
        let brute_us = t0.elapsed().as_micros();
        let t0 = Instant::now();
        let dyna = dynacomm_select(&problem);
        let dyna_us = t0.elapsed().as_micros();
        let t0 = Instant::now();
        let genetic = genetic_select(&problem, &GeneticParams::default());
        let genetic_us = t0.elapsed().as_micros();
        let t0 = Instant::now();
        let random = random_select(
            &problem,
            random_fraction,
            seeding::stream_seed(seed, "bench-random", &[trial as u64]),
        )?;
        let random_us = t0.elapsed().as_micros();
        times[0] += brute_us;
        times[1] += dyna_us;
        times[2] += genetic_us;
        times[3] += random_us;

        let (brute_kl, gap) = match &brute {
            Ok(b) => {
                if b.kl <= dyna.kl {
                    dominated += 1;
                }
                let gap = if b.kl.is_finite() && dyna.kl.is_finite() { dyna.kl - b.kl } else { 0.0 };
                gaps.push(gap);
                (fmt(b.kl), format!("{gap}"))
            }
            Err(e) => {
                eprintln!("trial {trial}: brute force unavailable: {e}");
                (String::new(), String::new())
            }
        };
        bench.push_str(&format!(
            "{trial},{candidates},{brute_kl},{brute_us},{},{dyna_us},{},{genetic_us},{},{random_us},{gap}\n",
            fmt(dyna.kl),
            fmt(genetic.kl),
            fmt(random.kl),
        ));
        for (size, kl) in kl_curve(&problem, candidates) {
            curve.push_str(&format!("{trial},{size},{}\n", fmt(kl)));
        }
    }
    std::fs::write(out.join("selector_bench.csv"), bench)?;
    std::fs::write(out.join("kl_curve.csv"), curve)?;
    let mean_gap = if gaps.is_empty() { 0.0 } else { gaps.iter().sum::<f64>() / gaps.len() as f64 };
    println!("trials={trials} candidates={candidates} classes={classes}");
    println!("oracle_dominance={}/{}", dominated, trials);
    println!("mean_gap_nats={mean_gap}");
    println!(
        "mean_us brute={} dynacomm={} genetic={} random={}",
        times[0] / trials as u128,
        times[1] / trials as u128,
        times[2] / trials as u128,
        times[3] / trials as u128,
    );
    println!("wrote {}", out.display());
    Ok(0)
}

fn cmd_partition_stats(config_path: &Path, seed_override: Option<u64>) -> anyhow::Result<i32> {
    let mut config = config::parse_config(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    let (train, _) = config.build_datasets()?;
    let clients = config.build_clients(&train)?;
    let global = dynamicfl::datastats::empirical_distribution(train.labels(), train.num_classes())?;
    let classes = train.num_classes();
    let mut header = String::from("client_id,samples,kl_to_global");
    for c in 0..classes {
        header.push_str(&format!(",class_{c}"));
    }
    println!("{header}");
    for client in &clients {
        let kl = if client.is_empty() {
            f64::NAN
        } else {
            kl_divergence(&client.label_dist, &global)?
        };
        let counts = client.data.class_counts();
        let mut line = format!("{},{},{}", client.client_id, client.len(), kl);
        for c in counts {
            line.push_str(&format!(",{c}"));
        }
        println!("{line}");
    }
    Ok(0)
}
