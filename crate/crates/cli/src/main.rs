use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use spardelta_core::codec::{decode_sm, encode_sm, measure_sparsity, measure_sparsity_sm, SparsityStats};
use spardelta_core::io::{qt_to_bytes, read_qt, read_smfm, smfm_to_bytes, write_atomic};
use spardelta_core::mem::{
    cost_trace, random_vs_burst_ratio, scattered_trace, schedule_dense_weight_stream, AccessTrace, BrainBudget,
    BudgetField, MemConfig,
};
use spardelta_core::netdesc::load_mem_config;
use spardelta_core::report::{scatter_csv, scatter_svg, ScatterPoint};
use spardelta_core::Error;

mod run;

/// Sparse CNN and delta-RNN accelerator simulator.
#[derive(Parser, Debug)]
#[command(name = "spardelta", version, about)]
struct Cli {
    /// Run config (TOML with an optional [mem] table)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for all synthetic data
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output format for printed results and reports
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Compress a dense .qt map into .smfm
    Encode { input: PathBuf, output: PathBuf },
    /// Expand a .smfm map into .qt
    Decode { input: PathBuf, output: PathBuf },
    /// Print sparsity statistics of a .qt or .smfm file
    Stats { input: PathBuf },
    /// Run a network on files or synthetic inputs
    Run(run::RunArgs),
    /// Sweep the delta threshold of a recurrent network
    SweepTheta(run::SweepArgs),
    /// Cost a DRAM access trace or a synthetic access pattern
    MemSim(MemSimArgs),
    /// Build the throughput-versus-power scatter from JSON reports
    Report(ReportArgs),
    /// Solve rate x fanout x neurons x energy = power for one unknown
    BrainBudget(BudgetArgs),
}

#[derive(Args, Debug)]
struct MemSimArgs {
    /// Trace CSV (region,address,kind,tag)
    #[arg(long, conflicts_with = "pattern")]
    trace: Option<PathBuf>,
    /// Synthetic pattern instead of a trace
    #[arg(long, value_enum)]
    pattern: Option<Pattern>,
    /// Words in the synthetic pattern
    #[arg(long, default_value_t = 10_000)]
    words: u64,
    /// Memory config TOML (overrides --config)
    #[arg(long)]
    mem: Option<PathBuf>,
    /// Also write the costed trace as CSV
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Pattern {
    Sequential,
    Scattered,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSON reports written by `run --report`
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Scatter CSV path
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Scatter SVG path
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BudgetArgs {
    /// Mean spike rate in Hz, or ?
    #[arg(long, allow_hyphen_values = true)]
    rate: String,
    /// Synapses per neuron, or ?
    #[arg(long, allow_hyphen_values = true)]
    fanout: String,
    /// Neuron count, or ?
    #[arg(long, allow_hyphen_values = true)]
    neurons: String,
    /// Energy per synaptic event in joules, or ?
    #[arg(long, allow_hyphen_values = true)]
    esyn: String,
    /// Power in watts, or ?
    #[arg(long, allow_hyphen_values = true)]
    power: String,
}

/// A dense and a sparse run disagreed on the network output.
#[derive(Debug)]
pub struct OutputDivergence(pub String);

impl std::fmt::Display for OutputDivergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "output divergence: {}", self.0)
    }
}

impl std::error::Error for OutputDivergence {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<OutputDivergence>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::ShapeMismatch(_)) => 3,
        Some(Error::MissingArtifact(_)) => 4,
        Some(_) => 2,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    mem: Option<MemConfig>,
}

/// Memory config from `--mem`, else `--config`'s [mem] table, else `fallback`.
pub fn resolve_mem(cli_mem: Option<&Path>, config: Option<&Path>, fallback: MemConfig) -> anyhow::Result<MemConfig> {
    if let Some(p) = cli_mem {
        return Ok(load_mem_config(p)?);
    }
    if let Some(p) = config {
        let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(p.display().to_string()),
            _ => Error::Io(e),
        })?;
        let rc: RunConfig = toml::from_str(&text).map_err(|e| Error::MalformedStream {
            offset: e.span().map(|r| r.start).unwrap_or(0),
            msg: format!("run config: {}", e.message()),
        })?;
        if let Some(m) = rc.mem {
            m.validate()?;
            return Ok(m);
        }
    }
    Ok(fallback)
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.cmd {
        Cmd::Encode { input, output } => {
            let t = read_qt(input)?;
            let s = encode_sm(&t);
            write_atomic(output, &smfm_to_bytes(&s))?;
            print_stats(&measure_sparsity_sm(&s), cli.format);
        }
        Cmd::Decode { input, output } => {
            let s = read_smfm(input)?;
            let t = decode_sm(&s)?;
            write_atomic(output, &qt_to_bytes(&t))?;
            print_stats(&measure_sparsity(&t), cli.format);
        }
        Cmd::Stats { input } => {
            let stats = if is_smfm(input)? {
                measure_sparsity_sm(&read_smfm(input)?)
            } else {
                measure_sparsity(&read_qt(input)?)
            };
            print_stats(&stats, cli.format);
        }
        Cmd::Run(a) => run::run(cli.seed, cli.format, cli.config.as_deref(), a)?,
        Cmd::SweepTheta(a) => run::sweep(cli.seed, cli.config.as_deref(), a)?,
        Cmd::MemSim(a) => mem_sim(cli, a)?,
        Cmd::Report(a) => report(a)?,
        Cmd::BrainBudget(a) => {
            let (field, value) = brain_budget(a)?;
            println!("{} {}", fmt_sig2(value), field.unit());
        }
    }
    Ok(())
}

fn is_smfm(p: &Path) -> anyhow::Result<bool> {
    use std::io::Read;
    let mut f = std::fs::File::open(p).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(p.display().to_string()),
        _ => Error::Io(e),
    })?;
    let mut magic = [0u8; 4];
    let n = f.read(&mut magic).map_err(Error::Io)?;
    Ok(n == 4 && &magic == b"SMFM")
}

fn print_stats(s: &SparsityStats, fmt: Format) {
    match fmt {
        Format::Json => println!("{}", serde_json::to_string_pretty(s).expect("stats serialize")),
        Format::Csv => {
            println!("channel,sparsity");
            for (c, v) in s.per_channel_sparsity.iter().enumerate() {
                println!("{c},{v}");
            }
            println!("all,{}", s.sparsity);
        }
    }
}

fn mem_sim(cli: &Cli, a: &MemSimArgs) -> anyhow::Result<()> {
    let cfg = resolve_mem(a.mem.as_deref(), cli.config.as_deref(), MemConfig::default())?;
    let trace = match (&a.trace, a.pattern) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(p.display().to_string()),
                _ => Error::Io(e),
            })?;
            AccessTrace::from_csv(&text)?
        }
        (None, Some(Pattern::Sequential)) => schedule_dense_weight_stream(1, a.words as usize, &cfg),
        (None, Some(Pattern::Scattered)) => scattered_trace(a.words, &cfg),
        (None, None) => anyhow::bail!(Error::InvalidConfig("give --trace or --pattern".into())),
    };
    let cost = cost_trace(&trace, &cfg);
    let ratio = match a.pattern {
        Some(_) if a.words > 0 => Some(random_vs_burst_ratio(a.words, &cfg)?),
        _ => None,
    };
    if let Some(p) = &a.export {
        write_atomic(p, trace.to_csv().as_bytes())?;
    }
    match cli.format {
        Format::Json => {
            let v = serde_json::json!({
                "cost": cost,
                "random_vs_burst_ratio": ratio,
                "mem_config": cfg,
                "provenance": cfg.provenance(),
            });
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
        }
        Format::Csv => {
            println!("cycles,row_activations,dram_words,sram_words,dram_bursts,energy_pj,random_vs_burst_ratio");
            println!(
                "{},{},{},{},{},{},{}",
                cost.cycles,
                cost.row_activations,
                cost.dram_words,
                cost.sram_words,
                cost.dram_bursts,
                cost.energy_pj,
                ratio.map(|r| r.to_string()).unwrap_or_else(|| "n/a".into())
            );
        }
    }
    Ok(())
}

fn report(a: &ReportArgs) -> anyhow::Result<()> {
    let mut points = Vec::with_capacity(a.reports.len());
    for p in &a.reports {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::MalformedStream {
                offset: 0,
                msg: format!("cannot read report {}: {e}", p.display()),
            })?;
        let pt = ScatterPoint::from_report_json(&text).map_err(|e| anyhow::Error::new(e).context(p.display().to_string()))?;
        points.push(pt);
    }
    let csv = scatter_csv(&points);
    match &a.csv {
        Some(p) => write_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    if let Some(p) = &a.svg {
        write_atomic(p, scatter_svg(&points).as_bytes())?;
    }
    Ok(())
}

fn brain_budget(a: &BudgetArgs) -> anyhow::Result<(BudgetField, f64)> {
    let parse = |name: &str, s: &str| -> anyhow::Result<Option<f64>> {
        if s.trim() == "?" {
            return Ok(None);
        }
        s.trim()
            .parse::<f64>()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("--{name}: expected a number or ?, got {s:?}")).into())
    };
    let b = BrainBudget {
        rate_hz: parse("rate", &a.rate)?,
        fanout: parse("fanout", &a.fanout)?,
        neurons: parse("neurons", &a.neurons)?,
        energy_per_syn_j: parse("esyn", &a.esyn)?,
        power_w: parse("power", &a.power)?,
    };
    let (field, solved) = b.solve()?;
    Ok((field, solved.get(field)))
}

/// Two significant digits; scientific outside `[1e-3, 1e6)`.
fn fmt_sig2(v: f64) -> String {
    let r: f64 = format!("{v:.1e}").parse().expect("float formats round-trip");
    let a = r.abs();
    if a == 0.0 || !(1e-3..1e6).contains(&a) {
        return format!("{v:.1e}");
    }
    let mag = a.log10().floor() as i32;
    let decimals = (1 - mag).max(0) as usize;
    format!("{r:.decimals$}")
}
