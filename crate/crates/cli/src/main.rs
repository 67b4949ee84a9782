mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde_json::json;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Simulate,
    Weights,
    Diagnose,
    Estimate,
    Mc,
    Bench,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Weights => "weights",
            Command::Diagnose => "diagnose",
            Command::Estimate => "estimate",
            Command::Mc => "mc",
            Command::Bench => "bench",
        }
    }
}

/// Finite-dependence weights, diagnostics and CCP estimation.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    command: Command,
    /// JSON or flat `dotted.key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `out/<command>-<confighash>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `estimation.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn fail(kind: &str, message: String, keys: Vec<String>, code: u8) -> ExitCode {
    let body = json!({ "error": kind, "message": message, "keys": keys });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("FINDEP_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or(format!("FINDEP_THREADS: expected a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("FINDEP_THREADS: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    if let Err(e) = init_threads() {
        return fail("config", e.clone(), vec![e], 2);
    }
    let mut cfg = match config::load(&cli.config) {
        Ok(c) => c,
        Err(e) => return fail("config", e.message, e.keys, 2),
    };
    if let Some(s) = cli.seed {
        cfg.estimation.seed = s;
    }
    let errs = config::validate(&cfg, name);
    if !errs.is_empty() {
        return fail("config", "invalid configuration".into(), errs, 2);
    }
    let hash = cfg.hash(name);
    let out = cli
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| commands::default_out(name, &hash));
    if let Err(e) = std::fs::create_dir_all(&out) {
        return fail("io", format!("cannot create {}: {e}", out.display()), vec!["out".into()], 1);
    }
    let ctx = commands::Ctx {
        cfg: &cfg,
        out: &out,
        hash: &hash,
    };
    let result = match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Weights => commands::weights_cmd(&ctx),
        Command::Diagnose => commands::diagnose(&ctx),
        Command::Estimate => commands::estimate(&ctx),
        Command::Mc => commands::mc(&ctx),
        Command::Bench => commands::bench(&ctx),
    };
    let resolved = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    match result.and_then(|mut files| {
        std::fs::write(out.join("config.json"), resolved)?;
        files.push("config.json".into());
        Ok(files)
    }) {
        Ok(files) => {
            println!(
                "{}",
                json!({ "command": name, "config_hash": hash, "out": out, "files": files })
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail("runtime", format!("{e:#}"), vec![], 1),
    }
}
