use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ehtsim::harness::{run_to_dir, series_label, summarize_dir, CaseMatrix, Summary};

#[derive(Parser)]
#[command(name = "ehtsim", version, about = "802.11be MAC simulator and experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a campaign and write runs.csv, summary.csv and summary.json.
    Run {
        /// Campaign file, or one of the built-in names throughput, latency, features.
        #[arg(long)]
        campaign: String,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        parallel: Option<usize>,
        /// Run only this case (plus the baseline).
        #[arg(long)]
        case: Option<String>,
    },
    /// Re-aggregate an output directory.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print a built-in campaign file.
    Template { name: String },
}

fn print_summary(s: &Summary) {
    for g in &s.groups {
        let load = g.load_mbps.map(|l| format!(" @{l} Mbps")).unwrap_or_default();
        let mean = g.mean.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let ci = g.ci95.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let gain = g.gain_percent.map(|v| format!(" gain {v:.1}%")).unwrap_or_default();
        println!(
            "{:<14} {}{load}: {} {mean} ± {ci} (n={}, failed={}){gain}",
            g.case,
            series_label(g.direction, g.mode),
            g.metric,
            g.n,
            g.failed
        );
    }
    if !s.feature_ranking.is_empty() {
        let order: Vec<String> =
            s.feature_ranking.iter().map(|f| format!("{} (+{:.2} Gbps)", f.case, f.delta_gbps)).collect();
        println!("feature ranking: {}", order.join(" < "));
    }
    for l in &s.latency_gains {
        println!(
            "{} {}: mean delay reduction {:.1}% over {} loads",
            l.case,
            series_label(l.direction, l.mode),
            l.mean_reduction_percent,
            l.loads
        );
    }
}

fn load_matrix(campaign: &str) -> Result<CaseMatrix, String> {
    if let Some(m) = CaseMatrix::by_name(campaign) {
        return Ok(m);
    }
    CaseMatrix::load(campaign.as_ref()).map_err(|e| format!("{campaign}: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { campaign, seeds, out, parallel, case } => {
            let m = match load_matrix(&campaign) {
                Ok(m) => m,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let seeds: Vec<u64> = (0..seeds).collect();
            let par = parallel.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            match run_to_dir(&m, &seeds, case.as_deref(), par, &out) {
                Ok((s, records)) => {
                    print_summary(&s);
                    let failed: Vec<_> = records.iter().filter(|r| !r.ok).collect();
                    for r in &failed {
                        eprintln!("failed: {} seed {} {}: {}", r.case, r.seed, series_label(r.direction, r.mode), r.error);
                    }
                    if failed.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Cmd::Summarize { input } => match summarize_dir(&input) {
            Ok(s) => {
                print_summary(&s);
                if s.groups.iter().any(|g| g.failed > 0) {
                    ExitCode::FAILURE
                } else {
                    ExitCode::SUCCESS
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Cmd::Template { name } => match CaseMatrix::by_name(&name) {
            Some(m) => {
                println!("{}", m.to_json_pretty());
                ExitCode::SUCCESS
            }
            None => {
                eprintln!("unknown campaign `{name}`");
                ExitCode::from(2)
            }
        },
    }
}
