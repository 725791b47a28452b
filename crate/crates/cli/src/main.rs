use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use speckv_core::codec::bench::{bench, parse_profile};
use speckv_core::codec::Scheme;
use speckv_core::config::SimConfig;
use speckv_core::sim::{engines_table, report, run, sweep_engines, sweep_k, sweep_k_table, trace_for, ReportFormat};
use speckv_core::validate;
use speckv_core::workload::write_trace;

#[derive(Parser)]
#[command(name = "speckv", version, about = "Speculative KV-cache prefetch simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Desk,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one simulation and write its metrics report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run once per prefetch depth.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        arms: Vec<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cache-engine scaling table.
    Scale {
        /// `a..b` (inclusive) or a comma list.
        #[arg(long, default_value = "1..4")]
        engines: String,
        /// Optional config supplying the timing parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Compression ratio of one scheme over a layer profile.
    CodecBench {
        #[arg(long)]
        scheme: Scheme,
        /// `default`, `default:<layers>`, a ratio list like `3.6,3.2,2.8`, or a file of ratios.
        #[arg(long, default_value = "default")]
        profile: String,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 512)]
        cols: usize,
        #[arg(long, default_value_t = 16)]
        blocks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Check the closed-form formula examples.
    Validate {
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Print a complete config in file form.
    Config {
        #[arg(value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Write the request trace a config would simulate.
    GenTrace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failures that map to exit code 2.
struct ConfigFailure(String);

impl<E: std::fmt::Display> From<E> for ConfigFailure {
    fn from(e: E) -> Self {
        ConfigFailure(e.to_string())
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<SimConfig, ConfigFailure> {
    let text = fs::read_to_string(path).map_err(|e| ConfigFailure(format!("{}: {e}", path.display())))?;
    let mut cfg = SimConfig::parse(&text).map_err(|e| ConfigFailure(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn put(text: &str) -> Result<(), ConfigFailure> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(ConfigFailure(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), ConfigFailure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| ConfigFailure(format!("{}: {e}", p.display()))),
        None => put(text),
    }
}

fn parse_engines(s: &str) -> Result<Vec<u32>, ConfigFailure> {
    let bad = || ConfigFailure(format!("--engines: expected `a..b` or a comma list, got `{s}`"));
    let ns: Vec<u32> = if let Some((a, b)) = s.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| bad())?;
        let b: u32 = b.trim().parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if ns.is_empty() || ns.contains(&0) {
        return Err(bad());
    }
    Ok(ns)
}

fn exec(cmd: Cmd) -> Result<ExitCode, ConfigFailure> {
    match cmd {
        Cmd::Simulate { config, seed, format, out } => {
            let cfg = load(&config, seed)?;
            let m = run(&cfg)?;
            emit(&report(&m, format.into()), out.as_deref())?;
        }
        Cmd::SweepK {
            config,
            arms,
            seed,
            format,
            out,
        } => {
            let cfg = load(&config, seed)?;
            if arms.is_empty() || arms.contains(&0) {
                return Err(ConfigFailure("--arms: depths must be positive".into()));
            }
            let rows = sweep_k(&cfg, &arms)?;
            emit(&sweep_k_table(&rows, format.into()), out.as_deref())?;
        }
        Cmd::Scale {
            engines,
            config,
            seed,
            format,
        } => {
            let ns = parse_engines(&engines)?;
            let timing = match config {
                Some(p) => load(&p, None)?.timing,
                None => SimConfig::default().timing,
            };
            put(&engines_table(&sweep_engines(&timing, seed, &ns), format.into()))?;
        }
        Cmd::CodecBench {
            scheme,
            profile,
            rows,
            cols,
            blocks,
            seed,
            format,
        } => {
            let text = if Path::new(&profile).is_file() {
                fs::read_to_string(&profile)?
            } else {
                profile
            };
            let p = parse_profile(&text)?;
            let r = bench(&p, scheme, rows, cols, blocks, seed);
            match format {
                Format::Csv => put(&r.to_csv())?,
                Format::Json => put(&serde_json_pretty(&r)?)?,
            }
        }
        Cmd::Validate { format } => {
            let checks = validate::run_all();
            match format {
                Some(Format::Json) => put(&serde_json_pretty(&checks)?)?,
                _ => put(&validate::render(&checks))?,
            }
            if checks.iter().any(|c| !c.pass) {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Config { preset } => {
            let cfg = match preset {
                Preset::Default => SimConfig::default(),
                Preset::Desk => SimConfig::desk(),
            };
            put(&cfg.to_text())?;
        }
        Cmd::GenTrace { config, seed, out } => {
            let cfg = load(&config, seed)?;
            emit(&write_trace(&trace_for(&cfg)?), out.as_deref())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn serde_json_pretty<T: serde::Serialize>(v: &T) -> Result<String, ConfigFailure> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec(cli.cmd) {
        Ok(code) => code,
        Err(ConfigFailure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
