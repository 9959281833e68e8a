use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mf_fbsde_core::error::Error;
use mf_fbsde_core::export::write_json;
use mf_fbsde_core::families::registry;
use mf_fbsde_core::parallel::with_threads;
use mf_fbsde_core::runner::{convergence_study, parse_ladder, run, write_study};
use mf_fbsde_core::scenario::{parse_scenario, Scenario};

const EXIT_CHECK: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "mf-fbsde", version, about = "Mean-field FBSDE solvers, cross-checks and studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every task of a scenario file.
    Run {
        scenario: PathBuf,
        /// Base directory for the scenario's output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Rerun a scenario along a parameter ladder and fit the error slope.
    Study {
        scenario: PathBuf,
        /// `param=v1,v2,...` with param one of N, M, dt, dx.
        #[arg(long)]
        ladder: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// List scenario files and the coefficient families they can use.
    ListScenarios {
        #[arg(long, default_value = "scenarios")]
        dir: PathBuf,
    },
    /// Summarize the reports found under a directory.
    Report { dir: PathBuf },
}

fn threads() -> Result<usize, String> {
    match std::env::var("MF_FBSDE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("MF_FBSDE_THREADS must be a positive integer, got '{v}'")),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn exit_for(e: &Error) -> u8 {
    if e.is_config() {
        EXIT_CONFIG
    } else if matches!(e.root(), Error::Hypothesis(_)) {
        EXIT_CHECK
    } else {
        EXIT_NUMERIC
    }
}

fn fail(e: &Error, sc: Option<&Scenario>, base: &Path) -> ExitCode {
    eprintln!("error: {e}");
    if let Error::PicardNotConverged { history, .. } = e.root() {
        eprintln!("picard gap history: {history:?}");
    }
    if let Some(sc) = sc {
        let history = match e.root() {
            Error::PicardNotConverged { history, .. } => history.clone(),
            _ => Vec::new(),
        };
        let doc = serde_json::json!({
            "scenario": sc.name,
            "scenario_hash": sc.hash(),
            "error": e.to_string(),
            "gap_history": history,
        });
        let _ = write_json(&sc.output_dir(base).join("failure.json"), &doc);
    }
    ExitCode::from(exit_for(e))
}

fn load(path: &Path) -> Result<Scenario, ExitCode> {
    parse_scenario(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })
}

fn cmd_run(path: &Path, base: &Path, n: usize) -> ExitCode {
    let sc = match load(path) {
        Ok(s) => s,
        Err(c) => return c,
    };
    match with_threads(n, || run(&sc, base)) {
        Ok(rep) => {
            println!("scenario {} ({}) hash {}", rep.scenario, rep.family, rep.scenario_hash);
            for c in &rep.checks {
                let mark = if c.pass { "PASS" } else { "FAIL" };
                println!("  {mark} {:<28} value {:<12.6e} tol {:<10.3e} {}", c.name, c.value, c.tolerance, c.detail);
            }
            for t in &rep.timings {
                println!("  stage {:<16} {:.2} s", t.stage, t.seconds);
            }
            println!("artifacts in {}", rep.output_dir.display());
            if rep.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECK)
            }
        }
        Err(e) => fail(&e, Some(&sc), base),
    }
}

fn cmd_study(path: &Path, ladder: &str, base: &Path, n: usize) -> ExitCode {
    let sc = match load(path) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let spec = match parse_ladder(ladder) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let rep = match with_threads(n, || convergence_study(&sc, &spec)) {
        Ok(r) => r,
        Err(e) => return fail(&e, Some(&sc), base),
    };
    let files = match write_study(&sc, base, &rep) {
        Ok(f) => f,
        Err(e) => return fail(&e, Some(&sc), base),
    };
    println!("{} ladder on {} ({}), reference: {}", rep.param.as_str(), rep.scenario, rep.quantity, rep.reference);
    for r in &rep.rows {
        println!("  {:<12} error {:.6e} (se {:.2e})", r.value, r.error, r.std_error);
    }
    println!("slope {:.4} +/- {:.4} (95%), rate: {}", rep.slope.slope, rep.slope.ci95, rep.rate_label);
    for f in files {
        println!("wrote {}", f.display());
    }
    match (rep.expected_band, rep.in_band) {
        (Some((lo, hi)), Some(ok)) => {
            println!("expected band [{lo}, {hi}]: {}", if ok { "inside" } else { "outside" });
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CHECK)
            }
        }
        _ => ExitCode::SUCCESS,
    }
}

fn cmd_list(dir: &Path) -> ExitCode {
    let mut files: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    let mut status = ExitCode::SUCCESS;
    println!("scenarios in {}:", dir.display());
    for f in &files {
        match parse_scenario(f) {
            Ok(sc) => {
                let tasks: Vec<&str> = sc.tasks.iter().map(|t| t.as_str()).collect();
                println!("  {:<20} family {:<18} tasks {}", sc.name, sc.problem.family, tasks.join(","));
            }
            Err(e) => {
                println!("  {:<20} INVALID: {e}", f.display());
                status = ExitCode::from(EXIT_CONFIG);
            }
        }
    }
    println!("coefficient families:");
    for f in registry() {
        let params: Vec<String> = f.params.iter().map(|p| format!("{}={}", p.name, p.default)).collect();
        println!("  {:<20} {}  [{}]", f.name, f.summary, params.join(", "));
    }
    status
}

fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) {
    let candidate = dir.join("report.json");
    if candidate.is_file() {
        out.push(candidate);
    }
    if let Ok(rd) = std::fs::read_dir(dir) {
        let mut subs: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        subs.sort();
        for s in subs {
            find_reports(&s, out);
        }
    }
}

fn cmd_report(dir: &Path) -> ExitCode {
    let mut reports = Vec::new();
    find_reports(dir, &mut reports);
    if reports.is_empty() {
        eprintln!("no report.json under {}", dir.display());
        return ExitCode::from(EXIT_CONFIG);
    }
    let mut all_pass = true;
    for path in reports {
        let doc: serde_json::Value = match std::fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
        {
            Ok(v) => v,
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                return ExitCode::from(EXIT_CONFIG);
            }
        };
        let root = path.parent().unwrap_or(Path::new("."));
        let missing: Vec<&str> = doc["artifacts"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|a| a.as_str())
            .filter(|a| !root.join(a).is_file())
            .collect();
        let pass = doc["pass"].as_bool().unwrap_or(false) && missing.is_empty();
        all_pass &= pass;
        let hash = doc["scenario_hash"].as_str().unwrap_or("?");
        println!(
            "{} {} (family {}, hash {})",
            if pass { "PASS" } else { "FAIL" },
            doc["scenario"].as_str().unwrap_or("?"),
            doc["family"].as_str().unwrap_or("?"),
            &hash[..hash.len().min(12)]
        );
        for c in doc["checks"].as_array().into_iter().flatten() {
            println!(
                "    {} {} = {} (tol {})",
                if c["pass"].as_bool() == Some(true) { "ok  " } else { "FAIL" },
                c["name"].as_str().unwrap_or("?"),
                c["value"],
                c["tolerance"]
            );
        }
        for m in missing {
            println!("    missing artifact {m}");
        }
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let n = match threads() {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match cli.command {
        Command::Run { scenario, out } => cmd_run(&scenario, &out, n),
        Command::Study { scenario, ladder, out } => cmd_study(&scenario, &ladder, &out, n),
        Command::ListScenarios { dir } => cmd_list(&dir),
        Command::Report { dir } => cmd_report(&dir),
    }
}
