//! `umdlab` batch runner.  Every study is a subcommand; reports go to stdout,
//! to `--out`, or to `$UMDLAB_OUT_DIR/<study>.<ext>`.
//!
//! Exit codes: 0 success, 1 usage or runtime error, 2 falsified invariant.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use umdlab::studies::{self, Study, StudyConfig, StudyReport};

const OUT_DIR_ENV: &str = "UMDLAB_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "umdlab", version, about = "Dyadic shift and Bellman-function experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact-arithmetic identity suite.
    Identities(Flags),
    /// Schur multiplier and α-search checks on random admissible matrices.
    SchurCheck(Flags),
    /// Ratio of the two λ-matrix norms.
    LambdaEquivalence(Flags),
    /// Range, monotonicity and concavity of the Bellman oracles.
    BellmanCheck(Flags),
    /// One-step Bellman estimate for complexity-k shifts.
    Lemma51(Flags),
    /// Lower bound for the martingale-transform norm.
    UmdProbe(Flags),
    /// Shift norms against the k·2^{k/2}·β growth bound.
    ScalingStudy(Flags),
    /// Averaged dyadic shifts against the Hilbert transform.
    HilbertDemo(Flags),
    /// Convergence of the decomposition series.
    SeriesBound(Flags),
}

impl Command {
    fn split(&self) -> (Study, &Flags) {
        match self {
            Command::Identities(f) => (Study::Identities, f),
            Command::SchurCheck(f) => (Study::SchurCheck, f),
            Command::LambdaEquivalence(f) => (Study::LambdaEquivalence, f),
            Command::BellmanCheck(f) => (Study::BellmanCheck, f),
            Command::Lemma51(f) => (Study::Lemma51, f),
            Command::UmdProbe(f) => (Study::UmdProbe, f),
            Command::ScalingStudy(f) => (Study::ScalingStudy, f),
            Command::HilbertDemo(f) => (Study::HilbertDemo, f),
            Command::SeriesBound(f) => (Study::SeriesBound, f),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
enum Format {
    #[default]
    Json,
    Csv,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
        }
    }
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// Flat `key = value` file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; defaults to stdout or `$UMDLAB_OUT_DIR/<study>.<ext>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    depth: Option<u32>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    grid_resolution: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    degree: Option<u32>,
    #[arg(long)]
    k_max: Option<u32>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Upper bound used for the Grothendieck constant.
    #[arg(long)]
    kg: Option<f64>,
}

/// Fully resolved run settings.
#[derive(Debug)]
struct Settings {
    study: Study,
    config: StudyConfig,
    format: Format,
    out: Option<PathBuf>,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value {value:?} for {key}: {e}"))
}

/// Applies a flat `key = value` file.  Blank lines and `#` comments are
/// skipped; keys may use `-` or `_`.
fn apply_file(text: &str, s: &mut Settings) -> Result<(), String> {
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value, found {raw:?}", n + 1))?;
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let c = &mut s.config;
        match key.as_str() {
            "subcommand" | "study" => {
                let named: Study = value.parse().map_err(|e| format!("line {}: {e}", n + 1))?;
                if named != s.study {
                    return Err(format!("config file is for {named}, not {}", s.study));
                }
            }
            "seed" => c.seed = parse_value(&key, value)?,
            "depth" => c.depth = parse_value(&key, value)?,
            "k" => c.k = parse_value(&key, value)?,
            "p" => c.p = parse_value(&key, value)?,
            "q" => c.q = parse_value(&key, value)?,
            "d" => c.d = parse_value(&key, value)?,
            "trials" => c.trials = parse_value(&key, value)?,
            "grid_resolution" => c.grid_resolution = parse_value(&key, value)?,
            "delta" => c.delta = parse_value(&key, value)?,
            "degree" => c.degree = parse_value(&key, value)?,
            "k_max" => c.k_max = parse_value(&key, value)?,
            "tolerance" => c.tolerance = parse_value(&key, value)?,
            "kg" => c.kg = parse_value(&key, value)?,
            "out" | "output_path" => s.out = Some(PathBuf::from(value)),
            "format" => s.format = Format::from_str(value, true).map_err(|e| format!("format: {e}"))?,
            _ => return Err(format!("line {}: unknown config key {key:?}", n + 1)),
        }
    }
    Ok(())
}

fn apply_flags(f: &Flags, s: &mut Settings) {
    let c = &mut s.config;
    macro_rules! set {
        ($($name:ident),*) => { $( if let Some(v) = f.$name { c.$name = v; } )* };
    }
    set!(
        seed,
        depth,
        k,
        p,
        q,
        d,
        trials,
        grid_resolution,
        delta,
        degree,
        k_max,
        tolerance,
        kg
    );
    if let Some(fmt) = f.format {
        s.format = fmt;
    }
    if let Some(out) = &f.out {
        s.out = Some(out.clone());
    }
}

fn resolve(cmd: &Command) -> Result<Settings, String> {
    let (study, flags) = cmd.split();
    let mut s = Settings {
        study,
        config: StudyConfig::defaults(study),
        format: Format::default(),
        out: None,
    };
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
        apply_file(&text, &mut s)?;
    }
    apply_flags(flags, &mut s);
    if s.out.is_none() {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            s.out = Some(Path::new(&dir).join(format!("{}.{}", study.name(), s.format.extension())));
        }
    }
    s.config.validate(study).map_err(|e| e.to_string())?;
    Ok(s)
}

fn render(report: &StudyReport, format: Format) -> Result<Vec<u8>, String> {
    match format {
        Format::Json => report.to_json().map(String::into_bytes).map_err(|e| e.to_string()),
        Format::Csv => {
            let mut buf = Vec::new();
            report.table.write_csv(&mut buf).map_err(|e| e.to_string())?;
            Ok(buf)
        }
    }
}

fn emit(bytes: &[u8], out: Option<&Path>) -> Result<(), String> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| format!("creating {}: {e}", dir.display()))?;
            }
            fs::write(path, bytes).map_err(|e| format!("writing {}: {e}", path.display()))
        }
        None => io::stdout()
            .write_all(bytes)
            .map_err(|e| format!("writing stdout: {e}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let informational = !e.use_stderr();
            let _ = e.print();
            return if informational {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let settings = match resolve(&cli.command) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let report = match studies::run(settings.study, &settings.config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {} failed: {e}", settings.study);
            return ExitCode::from(1);
        }
    };
    let written = render(&report, settings.format).and_then(|b| emit(&b, settings.out.as_deref()));
    if let Err(e) = written {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        eprintln!("{}: falsified {}", settings.study, report.falsified.join(", "));
        ExitCode::from(2)
    }
}
