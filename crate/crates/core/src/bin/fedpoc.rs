use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};

use fedpoc::client::{run_client, ClientConfig};
use fedpoc::config::ConfigFile;
use fedpoc::metrics::{
    compare_global_local, export_csv, format_percent, render_loss_table, render_summary, ExperimentReport,
};
use fedpoc::server::{run_experiment, ServerOptions};
use fedpoc::simulator::{simulate, speedup};
use fedpoc::Error;

#[derive(Parser, Debug)]
#[command(name = "fedpoc", version, about = "Federated learning rehearsal toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the aggregator until the experiment ends.
    Server {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "FEDPOC_LISTEN", default_value = "127.0.0.1:7878")]
        listen: String,
        /// Continue from the configured checkpoint.
        #[arg(long)]
        resume: bool,
        /// Where report.json, rounds.csv and summary.txt go.
        #[arg(long, default_value = "fedpoc-report")]
        out: PathBuf,
        /// Give up if the expected sites have not joined after this many seconds.
        #[arg(long)]
        startup_timeout: Option<f64>,
    },
    /// Run one site.
    Client {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        site: String,
        #[arg(long)]
        server: String,
        /// Stretch measured training time by this factor.
        #[arg(long, default_value_t = 1.0)]
        compute_multiplier: f64,
    },
    /// Run scenarios on the virtual-time simulator.
    Simulate {
        #[arg(long, required = true, num_args = 1..)]
        scenario: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare finished experiments.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Server { config, listen, resume, out, startup_timeout } => {
            cmd_server(&config, &listen, resume, &out, startup_timeout)
        }
        Command::Client { config, site, server, compute_multiplier } => {
            cmd_client(&config, &site, &server, compute_multiplier)
        }
        Command::Simulate { scenario, out } => cmd_simulate(&scenario, &out),
        Command::Report { inputs } => cmd_report(&inputs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedpoc: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Startup(_) | Error::Checkpoint(_) => 3,
        _ => 1,
    }
}

fn cmd_server(
    config: &Path,
    listen: &str,
    resume: bool,
    out: &Path,
    startup_timeout: Option<f64>,
) -> Result<(), Error> {
    let file = ConfigFile::load(config)?;
    let startup_timeout = match startup_timeout {
        Some(t) if !(t.is_finite() && t > 0.0) => {
            return Err(Error::Config(format!("--startup-timeout must be > 0, got {t}")))
        }
        t => t.map(Duration::from_secs_f64),
    };
    let listener = TcpListener::bind(listen).map_err(|e| Error::Startup(format!("cannot listen on {listen}: {e}")))?;
    eprintln!("fedpoc: listening on {}", listener.local_addr()?);
    let opts = ServerOptions { resume, startup_timeout, halt_after_round: None };
    let report = run_experiment(file.federation, listener, opts)?;
    write_outputs(&report, out)?;
    print!("{}", render_summary(&report));
    Ok(())
}

fn cmd_client(config: &Path, site: &str, server: &str, compute_multiplier: f64) -> Result<(), Error> {
    let file = ConfigFile::load(config)?;
    let mut cfg = ClientConfig::for_site(&file.federation, site, server)?;
    cfg.compute_multiplier = compute_multiplier;
    run_client(&cfg, &file.federation)?;
    println!("{site}: experiment done");
    Ok(())
}

fn cmd_simulate(scenarios: &[PathBuf], out: &Path) -> Result<(), Error> {
    // Validate everything before running anything.
    let mut loaded = Vec::new();
    for path in scenarios {
        let scenario =
            ConfigFile::load(path)?.scenario().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Config(format!("{}: cannot name an output directory", path.display())))?
            .to_string();
        loaded.push((stem, scenario));
    }
    for (stem, scenario) in &loaded {
        let report = simulate(scenario)?;
        write_outputs(&report, &out.join(stem))?;
        println!("== {stem}");
        print!("{}", render_summary(&report));
    }
    Ok(())
}

fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    report.write_json(&dir.join("report.json"))?;
    export_csv(report, &dir.join("rounds.csv"))?;
    std::fs::write(dir.join("summary.txt"), render_summary(report))?;
    Ok(())
}

fn cmd_report(inputs: &[PathBuf]) -> Result<(), Error> {
    let mut reports = Vec::new();
    for path in inputs {
        let file = if path.is_dir() { path.join("report.json") } else { path.clone() };
        let report = ExperimentReport::read_json(&file)
            .map_err(|e| Error::Config(format!("cannot read report {}: {e}", file.display())))?;
        reports.push((path.display().to_string(), report));
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<32} {:>12} {:>12} {:>12} {:>12}",
        "experiment", "total [hr]", "train [hr]", "aggr [hr]", "valid [hr]"
    );
    for (name, r) in &reports {
        let t = &r.totals;
        let _ = writeln!(
            s,
            "{:<32} {:>12.2} {:>12.2} {:>12.2} {:>12.2}",
            name,
            t.total() / 3600.0,
            t.train / 3600.0,
            t.aggregate / 3600.0,
            t.validate / 3600.0
        );
    }
    if reports.len() > 1 {
        let _ = writeln!(s, "\nspeedup against {}:", reports[0].0);
        for (name, r) in &reports[1..] {
            match speedup(&reports[0].1, r) {
                Ok(p) => {
                    let _ = writeln!(s, "  {name}: {}", format_percent(p));
                }
                Err(e) => {
                    let _ = writeln!(s, "  {name}: n/a");
                    eprintln!("fedpoc: {name}: {e}");
                }
            }
        }
    }
    print!("{s}");

    let Some((local_name, local)) = reports.iter().find_map(|(n, r)| r.local_cross.as_ref().map(|c| (n, c))) else {
        return Ok(());
    };
    let (global_name, global) = &reports[0];
    let global_means: BTreeMap<String, f64> = global.final_scores.iter().map(|(k, v)| (k.clone(), v.mean)).collect();
    let local_means: BTreeMap<String, BTreeMap<String, f64>> =
        local.iter().map(|(t, row)| (t.clone(), row.iter().map(|(v, sc)| (v.clone(), sc.mean)).collect())).collect();
    let table = compare_global_local(&global_means, &local_means)?;
    println!("\nlocal vs global ({local_name} against {global_name}), percentage points:");
    print!("{}", render_loss_table(&table));
    Ok(())
}
