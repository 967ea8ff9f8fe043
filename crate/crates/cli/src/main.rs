use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pullsim::calibrate::{fit_cpu_costs, CalibrationTarget};
use pullsim::error::ScenarioError;
use pullsim::runner::{replay_check, run_scenario, RunOptions, Summary};
use pullsim::scenario::ScenarioConfig;

#[derive(Parser)]
#[command(name = "pullsim", version, about = "Image pull queue simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        config: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for logs, gauge CSVs and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write only summary.json.
        #[arg(long)]
        summary_only: bool,
    },
    /// Exit 0 if two files are byte-identical, 1 otherwise.
    ReplayCheck { a: PathBuf, b: PathBuf },
    /// Fit the per-byte CPU costs of a scenario to a target SD and CPU average.
    Calibrate {
        config: PathBuf,
        #[arg(long, default_value_t = 46.82)]
        sd: f64,
        #[arg(long, default_value_t = 67.31)]
        cpu: f64,
    },
}

fn print_summary(s: &Summary) {
    println!("scenario {} ({} trials, seed {})", s.scenario, s.trials, s.seed);
    if let Some(sd) = &s.sd {
        println!("  sd              {:.2} s/GB (std {:.2})", sd.mean, sd.std);
    }
    if let Some(cpu) = &s.cpu_avg {
        println!("  cpu_avg         {:.2} %", cpu.mean);
    }
    if let Some(d) = &s.attack_duration {
        println!("  attack_duration {:.1} s", d.mean);
    }
    println!("  gc_firings      {}", s.gc_firings);
    println!("  evictions       {}", s.evictions);
    for (name, st) in &s.tenant_slowdown {
        println!("  tenant {name:<8} slowdown {:.3}", st.mean);
    }
    if let Some(m) = &s.magi_outcomes {
        println!(
            "  magi            alerts {} killed {} blacklisted {} too_late {} spared {}",
            m.alerts, m.killed, m.blacklisted, m.too_late, m.spared
        );
    }
    for t in &s.per_trial {
        if let Some(c) = &t.comparison {
            let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.1}"));
            println!(
                "  trial {} baseline {} attacked {} mitigated {} cancelled {}/{}",
                t.trial,
                f(c.baseline),
                f(c.attacked),
                f(c.mitigated),
                c.attack_images_cancelled,
                c.attack_images
            );
        }
        for sw in &t.sweep {
            println!(
                "  trial {} sweep {:.0} MB/s: largest completed {:?} B, smallest killed {:?} B",
                t.trial,
                sw.throughput / 1e6,
                sw.largest_completed,
                sw.smallest_killed
            );
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, ScenarioError> {
    match cli.command {
        Command::Run {
            config,
            trials,
            seed,
            out,
            summary_only,
        } => {
            let cfg = ScenarioConfig::load(&config)?;
            let opts = RunOptions {
                trials,
                seed,
                out: out.clone(),
                summary_only,
            };
            let summary = run_scenario(&cfg, &opts)?;
            if out.is_some() {
                print_summary(&summary);
            } else {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&summary).expect("summary serializes")
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ReplayCheck { a, b } => {
            let same = replay_check(&a, &b)?;
            println!("{}", if same { "identical" } else { "different" });
            Ok(if same { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Calibrate { config, sd, cpu } => {
            let cfg = ScenarioConfig::load(&config)?;
            let fit = fit_cpu_costs(&cfg, CalibrationTarget { sd, cpu_pct: cpu }, cfg.cost_model())?;
            println!(
                "download_cpu = \"{:.4} core-s/GB\"",
                fit.cost.download_cpu_per_byte * 1e9
            );
            println!("unpack_cpu = \"{:.4} core-s/GB\"", fit.cost.unpack_cpu_per_byte * 1e9);
            println!(
                "# sd {:.3} s/GB, cpu {:.3} %, {} iterations",
                fit.sd, fit.cpu_pct, fit.iterations
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
