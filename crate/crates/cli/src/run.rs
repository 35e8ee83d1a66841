//! `run` and `sweep-theta`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use spardelta_core::codec::decode_sm;
use spardelta_core::conv::{run_network, CnnRun, ConvLayerSpec, ConvOptions, ExecMode};
use spardelta_core::fxp::{quantize, OpCounter, QTensor};
use spardelta_core::gru::{run_sequence, GruLayerSpec, GruMode, GruRun, ACT_FMT};
use spardelta_core::io::{qt_to_bytes, read_qt, read_smfm, write_atomic};
use spardelta_core::mem::MemConfig;
use spardelta_core::netdesc::{Network, NetworkDesc};
use spardelta_core::report::{output_hash, RunReport};
use spardelta_core::synth::{self, SeqKind};
use spardelta_core::{par, Error};

use crate::{resolve_mem, Format, OutputDivergence};

/// Streams of the seeded generator used for inputs; layer weights use the
/// low streams.
const INPUT_STREAM_BASE: u64 = 1 << 32;

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Dense,
    Sparse,
}

#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    /// Network description (TOML)
    #[arg(long)]
    pub net: PathBuf,
    /// Input .qt/.smfm file, or a directory of them
    #[arg(long, conflicts_with = "synth")]
    pub input: Option<PathBuf>,
    /// Synthetic inputs: `sparse` for CNNs; `uniform`, `piecewise[:hold]` or
    /// `bandlimited[:alpha]` for recurrent networks
    #[arg(long)]
    pub synth: Option<String>,
    /// Number of synthetic inputs
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Synthetic CNN map shape C,H,W (C defaults to the first layer's inputs)
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    /// Zero fraction of synthetic CNN maps
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
    /// Steps per synthetic sequence
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Peak magnitude of synthetic values
    #[arg(long, default_value_t = 1.0)]
    pub amp: f64,
    /// Memory config TOML (overrides --config and the network's own)
    #[arg(long)]
    pub mem: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Engine: dense reference, or zero-skip / delta
    #[arg(long, value_enum, default_value_t = Mode::Sparse)]
    pub mode: Mode,
    /// Delta threshold for every recurrent layer (real units)
    #[arg(long)]
    pub theta: Option<f64>,
    /// Report path; `.csv` selects CSV, otherwise --format decides
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the first input's network output as .qt
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write per-step event rates of recurrent layers as CSV
    #[arg(long)]
    pub event_rates: Option<PathBuf>,
    /// Write the full-resolution conv output before pooling to DRAM
    #[arg(long)]
    pub no_fuse_pool: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Thresholds to try (real units)
    #[arg(long, value_delimiter = ',', required = true)]
    pub thetas: Vec<f64>,
    /// CSV path; stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct Loaded {
    name: String,
    net: Network,
    mem: MemConfig,
    inputs: Vec<QTensor>,
    label: String,
}

fn load(seed: u64, config: Option<&Path>, a: &InputArgs) -> anyhow::Result<Loaded> {
    let desc = NetworkDesc::load(&a.net)?;
    let base = a.net.parent().unwrap_or(Path::new("."));
    let built = desc.build(base, seed)?;
    let mem = resolve_mem(a.mem.as_deref(), config, built.mem)?;
    let (inputs, label) = match (&a.input, &a.synth) {
        (Some(p), _) => read_inputs(p)?,
        (None, Some(kind)) => synth_inputs(seed, &built.net, kind, a)?,
        (None, None) => anyhow::bail!(Error::InvalidConfig("give --input or --synth".into())),
    };
    if inputs.is_empty() {
        anyhow::bail!(Error::MissingArtifact("no inputs found".into()));
    }
    Ok(Loaded {
        name: built.name,
        net: built.net,
        mem,
        inputs,
        label,
    })
}

fn read_inputs(p: &Path) -> anyhow::Result<(Vec<QTensor>, String)> {
    let files = if p.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(Error::Io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|f| matches!(f.extension().and_then(|x| x.to_str()), Some("qt" | "smfm")))
            .collect();
        v.sort();
        v
    } else {
        vec![p.to_path_buf()]
    };
    let mut out = Vec::with_capacity(files.len());
    for f in &files {
        let t = if f.extension().and_then(|x| x.to_str()) == Some("smfm") {
            decode_sm(&read_smfm(f)?)?
        } else {
            read_qt(f)?
        };
        out.push(t);
    }
    Ok((out, format!("files ({} from {})", files.len(), p.display())))
}

fn synth_inputs(seed: u64, net: &Network, kind: &str, a: &InputArgs) -> anyhow::Result<(Vec<QTensor>, String)> {
    let stream = |k: usize| synth::rng(seed, INPUT_STREAM_BASE + k as u64);
    match net {
        Network::Cnn(layers) => {
            if kind != "sparse" {
                anyhow::bail!(Error::InvalidConfig(format!("CNN synthetic input must be `sparse`, got {kind:?}")));
            }
            let first = &layers[0];
            let (c, h, w) = match a.shape.as_deref() {
                None => (first.in_channels, 32, 32),
                Some([c, h, w]) => (*c, *h, *w),
                Some(other) => anyhow::bail!(Error::InvalidConfig(format!("--shape wants C,H,W, got {other:?}"))),
            };
            if !(0.0..=1.0).contains(&a.sparsity) {
                anyhow::bail!(Error::InvalidConfig("--sparsity must be in [0, 1]".into()));
            }
            let maps = par::map_indexed(a.count, |k| {
                synth::sparse_map((c, h, w), first.in_fmt, a.sparsity, a.amp, &mut stream(k))
            });
            let label = format!(
                "synthetic: {} Bernoulli maps {c}x{h}x{w}, zero fraction {}, seed {seed}",
                a.count, a.sparsity
            );
            Ok((maps, label))
        }
        Network::Gru(layers) => {
            let sk: SeqKind = kind.parse()?;
            let width = layers[0].input_size();
            let seqs = par::map_indexed(a.count, |k| synth::sequence(sk, a.steps, width, a.amp, &mut stream(k)))
                .into_iter()
                .collect::<spardelta_core::Result<Vec<_>>>()?;
            let label = format!("synthetic: {} {kind} sequences of {} steps, seed {seed}", a.count, a.steps);
            Ok((seqs, label))
        }
    }
}

fn check_cnn_input(layers: &[ConvLayerSpec], x: &QTensor, k: usize) -> spardelta_core::Result<()> {
    let first = &layers[0];
    if x.fmt() != first.in_fmt {
        return Err(Error::ShapeMismatch(format!("input {k} is {}, network expects {}", x.fmt(), first.in_fmt)));
    }
    if x.rank() < 3 {
        return Err(Error::ShapeMismatch(format!("input {k} has dims {:?}, expected (C, H, W)", x.dims())));
    }
    Ok(())
}

fn with_theta(layers: &[GruLayerSpec], theta: Option<f64>) -> anyhow::Result<Vec<GruLayerSpec>> {
    match theta {
        None => Ok(layers.to_vec()),
        Some(t) => {
            if t.is_nan() || t < 0.0 {
                anyhow::bail!(Error::InvalidConfig(format!("--theta must be >= 0, got {t}")));
            }
            let q = quantize(t, ACT_FMT, &mut OpCounter::default());
            Ok(layers.iter().map(|l| l.with_theta(q)).collect::<spardelta_core::Result<_>>()?)
        }
    }
}

pub fn run(seed: u64, format: Format, config: Option<&Path>, a: &RunArgs) -> anyhow::Result<()> {
    let ld = load(seed, config, &a.inputs)?;
    let report = match &ld.net {
        Network::Cnn(layers) => {
            if a.theta.is_some() {
                anyhow::bail!(Error::InvalidConfig("--theta applies to recurrent networks only".into()));
            }
            let opts = ConvOptions { fuse_pool: !a.no_fuse_pool };
            let (mode, other) = match a.mode {
                Mode::Dense => (ExecMode::Dense, ExecMode::Sparse),
                Mode::Sparse => (ExecMode::Sparse, ExecMode::Dense),
            };
            let runs = par::map_indexed(ld.inputs.len(), |k| -> anyhow::Result<CnnRun> {
                let x = &ld.inputs[k];
                check_cnn_input(layers, x, k)?;
                let r = run_network(layers, x, mode, &opts)?;
                let check = run_network(layers, x, other, &opts)?;
                if output_hash([&r.output]) != output_hash([&check.output]) {
                    anyhow::bail!(OutputDivergence(format!("dense and sparse outputs differ on input {k}")));
                }
                Ok(r)
            })
            .into_iter()
            .collect::<anyhow::Result<Vec<_>>>()?;
            if let Some(p) = &a.output {
                write_atomic(p, &qt_to_bytes(&runs[0].output))?;
            }
            RunReport::from_cnn_runs(&ld.name, mode, &runs, &ld.mem, &ld.label)?
        }
        Network::Gru(layers) => {
            let layers = with_theta(layers, a.theta)?;
            let mode = match a.mode {
                Mode::Dense => GruMode::Dense,
                Mode::Sparse => GruMode::Delta,
            };
            let exact = layers.iter().all(|l| l.theta.raw == 0);
            let runs = par::map_indexed(ld.inputs.len(), |k| -> anyhow::Result<GruRun> {
                let x = &ld.inputs[k];
                let r = run_sequence(&layers, x, mode, &ld.mem)?;
                if exact {
                    let other = if mode == GruMode::Dense { GruMode::Delta } else { GruMode::Dense };
                    let check = run_sequence(&layers, x, other, &ld.mem)?;
                    if output_hash([&r.outputs]) != output_hash([&check.outputs]) {
                        anyhow::bail!(OutputDivergence(format!(
                            "dense and delta outputs differ at theta 0 on input {k}"
                        )));
                    }
                }
                Ok(r)
            })
            .into_iter()
            .collect::<anyhow::Result<Vec<_>>>()?;
            if let Some(p) = &a.output {
                write_atomic(p, &qt_to_bytes(&runs[0].outputs))?;
            }
            RunReport::from_gru_runs(&ld.name, mode, &runs, &ld.mem, &ld.label)?
        }
    };
    if let Some(p) = &a.event_rates {
        match report.event_rate_csv() {
            Some(csv) => write_atomic(p, csv.as_bytes())?,
            None => anyhow::bail!(Error::InvalidConfig("--event-rates needs a recurrent network".into())),
        }
    }
    if let Some(p) = &a.report {
        let csv = p.extension().and_then(|x| x.to_str()) == Some("csv") || format == Format::Csv;
        let body = if csv { report.to_csv() } else { report.to_json() };
        write_atomic(p, body.as_bytes())?;
    }
    print!("{}", summary(&report));
    Ok(())
}

/// Per-layer sparsity table with the totals underneath.
fn summary(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} ({} {}, {} run(s))", r.name, r.network, r.mode, r.runs);
    let _ = writeln!(s, "{:>5}  {:<4}  {:>18}  {:>12}  {:>10}", "layer", "kind", "sparsity (+-se)", "efficiency%", "w-reduce");
    for l in &r.layers {
        let red = l
            .gru
            .as_ref()
            .and_then(|g| g.weight_reduction)
            .map(|v| format!("{v:.2}x"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>5}  {:<4}  {:>9.4} +- {:<6.4}  {:>12}  {:>10}",
            l.index,
            l.kind,
            l.sparsity.mean,
            l.sparsity.stderr,
            l.efficiency_pct.to_string(),
            red
        );
    }
    let t = &r.totals;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into());
    let _ = writeln!(
        s,
        "total: {} dense-equivalent Op, {} executed Op, efficiency {}%",
        t.dense_equivalent_ops, t.executed_ops, t.efficiency_pct
    );
    let _ = writeln!(
        s,
        "effective {} GOp/s, {} W, {} GOp/s/W",
        opt(r.fom.effective_gops),
        opt(r.fom.power_w),
        opt(r.fom.gops_per_w)
    );
    let _ = writeln!(s, "output sha256 {}", r.output_sha256);
    s
}

pub fn sweep(seed: u64, config: Option<&Path>, a: &SweepArgs) -> anyhow::Result<()> {
    let ld = load(seed, config, &a.inputs)?;
    let Network::Gru(layers) = &ld.net else {
        anyhow::bail!(Error::InvalidConfig("sweep-theta needs a recurrent network".into()));
    };
    let reference = par::map_indexed(ld.inputs.len(), |k| {
        run_sequence(&with_theta(layers, Some(0.0))?, &ld.inputs[k], GruMode::Dense, &ld.mem).map_err(anyhow::Error::from)
    })
    .into_iter()
    .collect::<anyhow::Result<Vec<_>>>()?;
    let mut out = String::new();
    let _ = writeln!(out, "# theta sweep: network {}, inputs {}", ld.name, ld.label);
    out.push_str("# accuracy proxy: deviation of last-layer outputs from the theta=0 run in real units; no task accuracy is implied\n");
    out.push_str("# caveat: event rate need not fall strictly with theta, since suppressed deltas change the hidden trajectory\n");
    out.push_str("# reference band for reduction factors: 5X-100X, depending on input statistics\n");
    out.push_str("theta,rms_dev,rel_rms_dev,max_abs_dev,weight_reduction,traffic_reduction,event_rate\n");
    for &theta in &a.thetas {
        let ls = with_theta(layers, Some(theta))?;
        let runs = par::map_indexed(ld.inputs.len(), |k| run_sequence(&ls, &ld.inputs[k], GruMode::Delta, &ld.mem))
            .into_iter()
            .collect::<spardelta_core::Result<Vec<_>>>()?;
        let (mut sq, mut ref_sq, mut n, mut max_dev) = (0f64, 0f64, 0usize, 0f64);
        let (mut w_dense, mut w_got, mut d_dense, mut d_got, mut rate) = (0u64, 0u64, 0u64, 0u64, 0f64);
        for (r, base) in runs.iter().zip(&reference) {
            for (&y, &y0) in r.outputs.data().iter().zip(base.outputs.data()) {
                let d = (y as f64 - y0 as f64) * ACT_FMT.ulp();
                sq += d * d;
                ref_sq += (y0 as f64 * ACT_FMT.ulp()).powi(2);
                max_dev = max_dev.max(d.abs());
                n += 1;
            }
            w_dense += r.weight_words_dense();
            w_got += r.weight_words_fetched();
            for l in &r.layers {
                d_dense += l.dense_cost.dram_words;
                d_got += l.cost.dram_words;
            }
            rate += r.mean_event_rate();
        }
        let rms = if n > 0 { (sq / n as f64).sqrt() } else { 0.0 };
        let ref_rms = if n > 0 { (ref_sq / n as f64).sqrt() } else { 0.0 };
        let fmt_ratio = |num: u64, den: u64| if den > 0 { format!("{:.4}", num as f64 / den as f64) } else { "n/a".into() };
        let _ = writeln!(
            out,
            "{},{:.6},{},{:.6},{},{},{:.6}",
            quantize(theta, ACT_FMT, &mut OpCounter::default()).to_f64(),
            rms,
            if ref_rms > 0.0 { format!("{:.6}", rms / ref_rms) } else { "n/a".into() },
            max_dev,
            fmt_ratio(w_dense, w_got),
            fmt_ratio(d_dense, d_got),
            rate / runs.len() as f64
        );
    }
    match &a.out {
        Some(p) => write_atomic(p, out.as_bytes())?,
        None => print!("{out}"),
    }
    Ok(())
}
