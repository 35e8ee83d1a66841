//! Run reports, figures of merit and the throughput-versus-power scatter.
//!
//! Effective throughput always counts dense-equivalent operations: a sparse
//! engine that skips 3/4 of its MACs but finishes in the same time as a dense
//! one has the same effective GOp/s.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::conv::{CnnRun, ExecMode};
use crate::error::{Error, Result};
use crate::fxp::{OpCounter, QTensor};
use crate::gru::{GruMode, GruRun};
use crate::io::qt_to_bytes;
use crate::mem::{cost_trace, energy_breakdown, AccessTag, ConfigProvenance, EnergyBreakdown, MemConfig, MemCostReport};

/// `100 × dense / executed`; serializes as the string `"n/a"` when nothing
/// was executed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Efficiency(pub Option<f64>);

impl Efficiency {
    pub fn from_counter(c: &OpCounter) -> Self {
        Efficiency(c.efficiency().map(|e| 100.0 * e))
    }
}

impl std::fmt::Display for Efficiency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.2}"),
            None => f.write_str("n/a"),
        }
    }
}

impl Serialize for Efficiency {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(v) => s.serialize_f64(v),
            None => s.serialize_str("n/a"),
        }
    }
}

/// DRAM bytes moved, split by tag.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TrafficBytes {
    pub weights: u64,
    pub activations: u64,
    pub state: u64,
    pub scratch: u64,
    pub total: u64,
}

impl TrafficBytes {
    fn from_cost(c: &MemCostReport) -> Self {
        let b = |t| 2 * c.per_tag.get(t).dram_words;
        TrafficBytes {
            weights: b(AccessTag::Weights),
            activations: b(AccessTag::Activations),
            state: b(AccessTag::State),
            scratch: b(AccessTag::Scratch),
            total: 2 * c.dram_words,
        }
    }
}

/// Mean and standard error of a per-run quantity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanStderr {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return MeanStderr::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        MeanStderr { mean, stderr, n }
    }
}

/// Delta-network extras for a recurrent layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GruExtras {
    pub theta_raw: i16,
    pub input_events: u64,
    pub hidden_events: u64,
    pub weight_words_fetched: u64,
    pub weight_words_dense: u64,
    pub weight_reduction: Option<f64>,
    pub traffic_reduction: Option<f64>,
    /// Per-step event rate, averaged over runs.
    pub event_rate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub index: usize,
    pub kind: &'static str,
    pub macs_executed: u64,
    pub macs_dense_equivalent: u64,
    pub executed_ops: u64,
    pub dense_equivalent_ops: u64,
    pub efficiency_pct: Efficiency,
    /// Input zero fraction (conv) or `1 - event rate` (GRU), across runs.
    pub sparsity: MeanStderr,
    pub output_sparsity: Option<MeanStderr>,
    pub traffic_bytes: TrafficBytes,
    pub dram_words: u64,
    pub sram_words: u64,
    pub row_activations: u64,
    pub cycles: f64,
    pub energy: EnergyBreakdown,
    pub gru: Option<GruExtras>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Totals {
    pub macs_executed: u64,
    pub macs_dense_equivalent: u64,
    pub executed_ops: u64,
    pub dense_equivalent_ops: u64,
    pub efficiency_pct: Efficiency,
    pub traffic_bytes: TrafficBytes,
    pub dram_words: u64,
    pub sram_words: u64,
    pub cycles: f64,
    pub energy: EnergyBreakdown,
    pub weight_reduction: Option<f64>,
    pub traffic_reduction: Option<f64>,
}

/// Derived figures of merit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fom {
    /// `max(memory cycles, MACs / mac_units) / clock_hz`.
    pub simulated_seconds: f64,
    pub effective_gops: Option<f64>,
    pub power_w: Option<f64>,
    pub gops_per_w: Option<f64>,
}

impl Fom {
    pub fn compute(dense_ops: u64, macs_executed: u64, cycles: f64, energy_pj: f64, cfg: &MemConfig) -> Self {
        let compute_cycles = macs_executed.div_ceil(cfg.mac_units) as f64;
        let seconds = cycles.max(compute_cycles) / cfg.clock_hz;
        let joules = energy_pj * 1e-12;
        let pos = |v: f64| (v > 0.0).then_some(v);
        Fom {
            simulated_seconds: seconds,
            effective_gops: pos(seconds).map(|s| dense_ops as f64 / s / 1e9),
            power_w: pos(seconds).and_then(|s| pos(joules).map(|j| j / s)),
            gops_per_w: pos(joules).map(|j| dense_ops as f64 / j / 1e9),
        }
    }
}

/// Where each class of number came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub op_counts: &'static str,
    pub inputs: String,
    #[serde(flatten)]
    pub mem: ConfigProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub name: String,
    pub network: &'static str,
    pub mode: &'static str,
    pub runs: usize,
    pub layers: Vec<LayerReport>,
    pub totals: Totals,
    pub fom: Fom,
    pub peak_live_bytes: Option<u64>,
    /// SHA-256 over the `.qt` encoding of every output, in input order.
    pub output_sha256: String,
    pub mem_config: MemConfig,
    pub provenance: Provenance,
}

/// Hex SHA-256 over the `.qt` bytes of each tensor in order.
pub fn output_hash<'a>(outputs: impl IntoIterator<Item = &'a QTensor>) -> String {
    let mut h = Sha256::new();
    for t in outputs {
        h.update(qt_to_bytes(t));
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

struct Acc {
    counters: OpCounter,
    cost: MemCostReport,
    sparsity: Vec<f64>,
    out_sparsity: Vec<f64>,
}

impl Acc {
    fn new() -> Self {
        Acc {
            counters: OpCounter::default(),
            cost: MemCostReport::default(),
            sparsity: Vec::new(),
            out_sparsity: Vec::new(),
        }
    }
}

fn layer_report(index: usize, kind: &'static str, a: &Acc, gru: Option<GruExtras>, cfg: &MemConfig) -> LayerReport {
    LayerReport {
        index,
        kind,
        macs_executed: a.counters.macs_executed,
        macs_dense_equivalent: a.counters.macs_dense_equivalent,
        executed_ops: a.counters.total_ops(),
        dense_equivalent_ops: a.counters.dense_equivalent_ops(),
        efficiency_pct: Efficiency::from_counter(&a.counters),
        sparsity: MeanStderr::of(&a.sparsity),
        output_sparsity: (!a.out_sparsity.is_empty()).then(|| MeanStderr::of(&a.out_sparsity)),
        traffic_bytes: TrafficBytes::from_cost(&a.cost),
        dram_words: a.cost.dram_words,
        sram_words: a.cost.sram_words,
        row_activations: a.cost.row_activations,
        cycles: a.cost.cycles,
        energy: energy_breakdown(a.counters.macs_executed, &a.cost, cfg),
        gru,
    }
}

fn totals(accs: &[Acc], cfg: &MemConfig) -> (Totals, Fom) {
    let counters: OpCounter = accs.iter().map(|a| a.counters).sum();
    let mut cost = MemCostReport::default();
    for a in accs {
        cost.merge(&a.cost);
    }
    let energy = energy_breakdown(counters.macs_executed, &cost, cfg);
    let fom = Fom::compute(
        counters.dense_equivalent_ops(),
        counters.macs_executed,
        cost.cycles,
        energy.total_pj,
        cfg,
    );
    let t = Totals {
        macs_executed: counters.macs_executed,
        macs_dense_equivalent: counters.macs_dense_equivalent,
        executed_ops: counters.total_ops(),
        dense_equivalent_ops: counters.dense_equivalent_ops(),
        efficiency_pct: Efficiency::from_counter(&counters),
        traffic_bytes: TrafficBytes::from_cost(&cost),
        dram_words: cost.dram_words,
        sram_words: cost.sram_words,
        cycles: cost.cycles,
        energy,
        weight_reduction: None,
        traffic_reduction: None,
    };
    (t, fom)
}

fn provenance(cfg: &MemConfig, inputs: &str) -> Provenance {
    Provenance {
        op_counts: "measured (simulator counters)",
        inputs: inputs.to_string(),
        mem: cfg.provenance(),
    }
}

impl RunReport {
    /// Aggregates CNN runs of the same network (one per input). Counters and
    /// costs are summed; sparsity is averaged with its standard error.
    pub fn from_cnn_runs(name: &str, mode: ExecMode, runs: &[CnnRun], cfg: &MemConfig, inputs: &str) -> Result<Self> {
        let n_layers = runs.first().map(|r| r.layers.len()).ok_or_else(|| Error::config("no runs to report"))?;
        let mut accs: Vec<Acc> = (0..n_layers).map(|_| Acc::new()).collect();
        for r in runs {
            if r.layers.len() != n_layers {
                return Err(Error::shape("runs have different layer counts"));
            }
            for (a, l) in accs.iter_mut().zip(&r.layers) {
                a.counters += l.counters;
                a.cost.merge(&cost_trace(&l.accesses, cfg));
                a.sparsity.push(l.input_sparsity.sparsity);
                a.out_sparsity.push(l.output_sparsity.sparsity);
            }
        }
        let layers = accs.iter().enumerate().map(|(i, a)| layer_report(i, "conv", a, None, cfg)).collect();
        let (totals, fom) = totals(&accs, cfg);
        Ok(RunReport {
            name: name.to_string(),
            network: "cnn",
            mode: match mode {
                ExecMode::Dense => "dense",
                ExecMode::Sparse => "sparse",
            },
            runs: runs.len(),
            layers,
            totals,
            fom,
            peak_live_bytes: runs.iter().map(|r| r.peak_live_bytes).max(),
            output_sha256: output_hash(runs.iter().map(|r| &r.output)),
            mem_config: cfg.clone(),
            provenance: provenance(cfg, inputs),
        })
    }

    /// Aggregates recurrent runs; per-step event rates are averaged across
    /// runs step by step.
    pub fn from_gru_runs(name: &str, mode: GruMode, runs: &[GruRun], cfg: &MemConfig, inputs: &str) -> Result<Self> {
        let n_layers = runs.first().map(|r| r.layers.len()).ok_or_else(|| Error::config("no runs to report"))?;
        let mut accs: Vec<Acc> = (0..n_layers).map(|_| Acc::new()).collect();
        let mut extras: Vec<(GruExtras, Vec<usize>, MemCostReport)> = Vec::new();
        for r in runs {
            if r.layers.len() != n_layers {
                return Err(Error::shape("runs have different layer counts"));
            }
            for (i, l) in r.layers.iter().enumerate() {
                let a = &mut accs[i];
                a.counters += l.counters;
                a.cost.merge(&l.cost);
                if !l.event_rate.is_empty() {
                    let mean = l.event_rate.iter().sum::<f64>() / l.event_rate.len() as f64;
                    a.sparsity.push(1.0 - mean);
                }
                if extras.len() <= i {
                    extras.push((
                        GruExtras {
                            theta_raw: l.theta_raw,
                            input_events: 0,
                            hidden_events: 0,
                            weight_words_fetched: 0,
                            weight_words_dense: 0,
                            weight_reduction: None,
                            traffic_reduction: None,
                            event_rate: Vec::new(),
                        },
                        Vec::new(),
                        MemCostReport::default(),
                    ));
                }
                let (e, counts, dense) = &mut extras[i];
                e.input_events += l.input_events;
                e.hidden_events += l.hidden_events;
                e.weight_words_fetched += l.weight_words_fetched;
                e.weight_words_dense += l.weight_words_dense;
                dense.merge(&l.dense_cost);
                if e.event_rate.len() < l.event_rate.len() {
                    e.event_rate.resize(l.event_rate.len(), 0.0);
                    counts.resize(l.event_rate.len(), 0);
                }
                for (k, &v) in l.event_rate.iter().enumerate() {
                    e.event_rate[k] += v;
                    counts[k] += 1;
                }
            }
        }
        let (mut w_fetched, mut w_dense, mut d_got, mut d_dense) = (0u64, 0u64, 0u64, 0u64);
        let layers = accs
            .iter()
            .zip(extras)
            .enumerate()
            .map(|(i, (a, (mut e, counts, dense)))| {
                for (v, c) in e.event_rate.iter_mut().zip(&counts) {
                    *v /= *c as f64;
                }
                e.weight_reduction = ratio(e.weight_words_dense, e.weight_words_fetched);
                e.traffic_reduction = ratio(dense.dram_words, a.cost.dram_words);
                w_fetched += e.weight_words_fetched;
                w_dense += e.weight_words_dense;
                d_got += a.cost.dram_words;
                d_dense += dense.dram_words;
                layer_report(i, "gru", a, Some(e), cfg)
            })
            .collect();
        let (mut totals, fom) = totals(&accs, cfg);
        totals.weight_reduction = ratio(w_dense, w_fetched);
        totals.traffic_reduction = ratio(d_dense, d_got);
        Ok(RunReport {
            name: name.to_string(),
            network: "gru",
            mode: match mode {
                GruMode::Dense => "dense",
                GruMode::Delta => "delta",
            },
            runs: runs.len(),
            layers,
            totals,
            fom,
            peak_live_bytes: None,
            output_sha256: output_hash(runs.iter().map(|r| &r.outputs)),
            mem_config: cfg.clone(),
            provenance: provenance(cfg, inputs),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per layer plus a `total` row. Provenance goes in `#` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let p = &self.provenance;
        let _ = writeln!(s, "# name={} network={} mode={} runs={}", self.name, self.network, self.mode, self.runs);
        let _ = writeln!(s, "# inputs: {}", p.inputs);
        let _ = writeln!(s, "# row_change_factor: {}", p.mem.row_change_factor);
        let _ = writeln!(s, "# energy: {}", p.mem.energy);
        let _ = writeln!(s, "# timing: {}", p.mem.timing);
        let _ = writeln!(s, "# output_sha256: {}", self.output_sha256);
        s.push_str(
            "layer,kind,dense_equivalent_ops,executed_ops,efficiency_pct,sparsity_mean,sparsity_stderr,\
             weight_bytes,activation_bytes,state_bytes,scratch_bytes,dram_bytes,cycles,energy_pj,\
             weight_reduction,traffic_reduction\n",
        );
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
        for l in &self.layers {
            let t = &l.traffic_bytes;
            let (wr, tr) = l.gru.as_ref().map(|g| (g.weight_reduction, g.traffic_reduction)).unwrap_or((None, None));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6},{},{},{},{},{},{},{},{},{}",
                l.index,
                l.kind,
                l.dense_equivalent_ops,
                l.executed_ops,
                l.efficiency_pct,
                l.sparsity.mean,
                l.sparsity.stderr,
                t.weights,
                t.activations,
                t.state,
                t.scratch,
                t.total,
                l.cycles,
                l.energy.total_pj,
                opt(wr),
                opt(tr)
            );
        }
        let t = &self.totals;
        let b = &t.traffic_bytes;
        let _ = writeln!(
            s,
            "total,{},{},{},{},,,{},{},{},{},{},{},{},{},{}",
            self.network,
            t.dense_equivalent_ops,
            t.executed_ops,
            t.efficiency_pct,
            b.weights,
            b.activations,
            b.state,
            b.scratch,
            b.total,
            t.cycles,
            t.energy.total_pj,
            opt(t.weight_reduction),
            opt(t.traffic_reduction)
        );
        let f = &self.fom;
        let _ = writeln!(
            s,
            "# simulated_seconds={} effective_gops={} power_w={} gops_per_w={}",
            f.simulated_seconds,
            opt(f.effective_gops),
            opt(f.power_w),
            opt(f.gops_per_w)
        );
        s
    }

    /// Event-rate timeline per GRU layer as `step,layer0,layer1,...`.
    pub fn event_rate_csv(&self) -> Option<String> {
        let rates: Vec<&Vec<f64>> = self.layers.iter().filter_map(|l| l.gru.as_ref().map(|g| &g.event_rate)).collect();
        if rates.is_empty() {
            return None;
        }
        let mut s = String::from("step");
        for i in 0..rates.len() {
            let _ = write!(s, ",layer{i}");
        }
        s.push('\n');
        let steps = rates.iter().map(|r| r.len()).max().unwrap_or(0);
        for k in 0..steps {
            let _ = write!(s, "{k}");
            for r in &rates {
                match r.get(k) {
                    Some(v) => {
                        let _ = write!(s, ",{v:.6}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        Some(s)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Energy split recomputed from a report's totals.
pub fn energy_report(report: &RunReport, cfg: &MemConfig) -> EnergyBreakdown {
    let t = &report.totals;
    let mac_pj = t.macs_executed as f64 * cfg.e_mac;
    let dram_pj = t.dram_words as f64 * cfg.e_dram_word;
    let sram_pj = t.sram_words as f64 * cfg.e_sram_word;
    EnergyBreakdown {
        mac_pj,
        dram_pj,
        sram_pj,
        total_pj: mac_pj + dram_pj + sram_pj,
    }
}

/// One accelerator on the throughput-versus-power chart.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub name: String,
    pub gops: f64,
    pub watts: f64,
    pub gops_per_w: f64,
}

impl ScatterPoint {
    pub fn new(name: impl Into<String>, gops: f64, watts: f64) -> Self {
        ScatterPoint {
            name: name.into(),
            gops,
            watts,
            gops_per_w: gops / watts,
        }
    }

    /// Reads `name`, `fom.effective_gops` and `fom.power_w` from a JSON report.
    pub fn from_report_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::malformed(0, format!("report is not valid JSON: {e}")))?;
        let name = v["name"].as_str().ok_or_else(|| Error::malformed(0, "report has no name"))?;
        let field = |k: &str| {
            v["fom"][k]
                .as_f64()
                .filter(|x| *x > 0.0)
                .ok_or_else(|| Error::malformed(0, format!("report has no positive fom.{k}")))
        };
        Ok(ScatterPoint::new(name, field("effective_gops")?, field("power_w")?))
    }
}

pub fn scatter_csv(points: &[ScatterPoint]) -> String {
    let mut s = String::from("name,gops,watts,gops_per_w\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", csv_field(&p.name), p.gops, p.watts, p.gops_per_w);
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Log-log plot area mapping watts (x) and GOp/s (y) to SVG pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogFrame {
    pub x_decades: (i32, i32),
    pub y_decades: (i32, i32),
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl LogFrame {
    /// Whole decades covering every point with at least one decade of margin
    /// on each side.
    pub fn fit(points: &[ScatterPoint]) -> Self {
        let span = |vals: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if lo.is_finite() {
                (lo.log10().floor() as i32 - 1, hi.log10().ceil() as i32 + 1)
            } else {
                (-1, 1)
            }
        };
        LogFrame {
            x_decades: span(&mut points.iter().map(|p| p.watts)),
            y_decades: span(&mut points.iter().map(|p| p.gops)),
            left: 70.0,
            top: 30.0,
            width: 560.0,
            height: 400.0,
        }
    }

    pub fn map(&self, watts: f64, gops: f64) -> (f64, f64) {
        let fx = (watts.log10() - self.x_decades.0 as f64) / (self.x_decades.1 - self.x_decades.0) as f64;
        let fy = (gops.log10() - self.y_decades.0 as f64) / (self.y_decades.1 - self.y_decades.0) as f64;
        (self.left + fx * self.width, self.top + (1.0 - fy) * self.height)
    }

    /// Endpoints of the `gops = eff · watts` line clipped to the frame.
    pub fn iso_line(&self, gops_per_w: f64) -> Option<((f64, f64), (f64, f64))> {
        let (x0, x1) = (10f64.powi(self.x_decades.0), 10f64.powi(self.x_decades.1));
        let (y0, y1) = (10f64.powi(self.y_decades.0), 10f64.powi(self.y_decades.1));
        let lo = x0.max(y0 / gops_per_w);
        let hi = x1.min(y1 / gops_per_w);
        (lo < hi).then(|| (self.map(lo, lo * gops_per_w), self.map(hi, hi * gops_per_w)))
    }
}

/// Iso-efficiency diagonals drawn on the chart, in GOp/s/W.
pub const ISO_LINES: [(f64, &str); 4] = [
    (1.0, "1 GOp/s/W"),
    (10.0, "10 GOp/s/W"),
    (100.0, "100 GOp/s/W"),
    (1000.0, "1 TOp/s/W"),
];

/// Throughput versus power, log-log, with iso-efficiency diagonals.
pub fn scatter_svg(points: &[ScatterPoint]) -> String {
    let f = LogFrame::fit(points);
    let mut s = String::new();
    let (w, h) = (f.left + f.width + 30.0, f.top + f.height + 60.0);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<defs><clipPath id="plot"><rect x="{}" y="{}" width="{}" height="{}"/></clipPath></defs>"#, f.left, f.top, f.width, f.height);
    for d in f.x_decades.0..=f.x_decades.1 {
        let (x, _) = f.map(10f64.powi(d), 10f64.powi(f.y_decades.0));
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#ddd"/><text x="{x:.2}" y="{}" text-anchor="middle">1e{d}</text>"##,
            f.top,
            f.top + f.height,
            f.top + f.height + 15.0
        );
    }
    for d in f.y_decades.0..=f.y_decades.1 {
        let (_, y) = f.map(10f64.powi(f.x_decades.0), 10f64.powi(d));
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">1e{d}</text>"##,
            f.left,
            f.left + f.width,
            f.left - 5.0,
            y + 4.0
        );
    }
    for (eff, label) in ISO_LINES {
        if let Some(((x1, y1), (x2, y2))) = f.iso_line(eff) {
            let _ = writeln!(
                s,
                r##"<line class="iso" data-gops-per-w="{eff}" x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="#999" stroke-dasharray="4 3" clip-path="url(#plot)"/><text x="{:.2}" y="{:.2}" fill="#777">{label}</text>"##,
                x2 - 60.0,
                y2 + 14.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        f.left, f.top, f.width, f.height
    );
    for p in points {
        let (x, y) = f.map(p.watts, p.gops);
        let _ = writeln!(
            s,
            r##"<circle class="point" cx="{x:.2}" cy="{y:.2}" r="4" fill="#c03"/><text x="{:.2}" y="{:.2}">{}</text>"##,
            x + 6.0,
            y - 6.0,
            xml_escape(&p.name)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Power (W)</text>"#,
        f.left + f.width / 2.0,
        f.top + f.height + 40.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">Throughput (GOp/s)</text>"#,
        f.top + f.height / 2.0,
        f.top + f.height / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{run_network, ConvOptions, Pool};
    use crate::fxp::QFormat;
    use crate::synth;

    #[test]
    fn efficiency_na_when_nothing_executed() {
        let c = OpCounter {
            macs_dense_equivalent: 10,
            ..Default::default()
        };
        let e = Efficiency::from_counter(&c);
        assert_eq!(e.0, None);
        assert_eq!(e.to_string(), "n/a");
        assert_eq!(serde_json::to_string(&e).unwrap(), "\"n/a\"");
        let c = OpCounter {
            macs_dense_equivalent: 40,
            macs_executed: 10,
            ..Default::default()
        };
        assert_eq!(Efficiency::from_counter(&c).0, Some(400.0));
    }

    #[test]
    fn fom_arithmetic() {
        let cfg = MemConfig::default();
        // 1e9 cycles at 500 MHz is 2 s; 4e9 Op over 2 s is 2 GOp/s
        let f = Fom::compute(4_000_000_000, 0, 1e9, 2e12, &cfg);
        assert_eq!(f.simulated_seconds, 2.0);
        assert_eq!(f.effective_gops, Some(2.0));
        assert_eq!(f.power_w, Some(1.0));
        assert_eq!(f.gops_per_w, Some(2.0));
        // compute-bound: 128e9 MACs on 128 units is 1e9 cycles
        let f = Fom::compute(1, 128_000_000_000, 10.0, 1.0, &cfg);
        assert_eq!(f.simulated_seconds, 2.0);
        let z = Fom::compute(0, 0, 0.0, 0.0, &cfg);
        assert_eq!((z.effective_gops, z.gops_per_w), (None, None));
    }

    #[test]
    fn energy_report_zero_traffic() {
        let cfg = MemConfig::default();
        let mut r = cnn_report();
        r.totals.dram_words = 0;
        r.totals.sram_words = 0;
        r.totals.macs_executed = 1234;
        let e = energy_report(&r, &cfg);
        assert_eq!(e.total_pj, 1234.0 * cfg.e_mac);
        r.totals.dram_words = 1234;
        let e = energy_report(&r, &cfg);
        assert_eq!(e.dram_pj, 100.0 * e.mac_pj);
    }

    fn cnn_report() -> RunReport {
        let mut r = synth::rng(5, 0);
        let layers: Vec<_> = (0..4)
            .map(|i| synth::random_conv_layer(if i == 0 { 2 } else { 4 }, 4, 3, 1, 1, true, if i == 1 { Pool::Max2x2 } else { Pool::None }, 0.3, 0.05, &mut r))
            .collect();
        let runs: Vec<_> = (0..3)
            .map(|k| {
                let x = synth::sparse_map((2, 12, 12), QFormat::Q8_8, 0.5, 2.0, &mut synth::rng(5, 10 + k));
                run_network(&layers, &x, ExecMode::Sparse, &ConvOptions::default()).unwrap()
            })
            .collect();
        RunReport::from_cnn_runs("t", ExecMode::Sparse, &runs, &MemConfig::default(), "synthetic").unwrap()
    }

    #[test]
    fn totals_are_layer_sums() {
        let r = cnn_report();
        assert_eq!(r.layers.len(), 4);
        let sum = |f: fn(&LayerReport) -> u64| r.layers.iter().map(f).sum::<u64>();
        assert_eq!(r.totals.executed_ops, sum(|l| l.executed_ops));
        assert_eq!(r.totals.dense_equivalent_ops, sum(|l| l.dense_equivalent_ops));
        assert_eq!(r.totals.dram_words, sum(|l| l.dram_words));
        assert_eq!(r.totals.traffic_bytes.total, sum(|l| l.traffic_bytes.total));
        let e: f64 = r.layers.iter().map(|l| l.energy.total_pj).sum();
        assert!((r.totals.energy.total_pj - e).abs() < 1e-6 * e);
        assert_eq!(r.runs, 3);
        assert_eq!(r.layers[0].sparsity.n, 3);
        assert!(r.to_csv().lines().any(|l| l.starts_with("total,cnn,")));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["provenance"]["energy"], "default-config (not measured)");
        assert_eq!(v["output_sha256"].as_str().unwrap().len(), 64);
    }

    #[test]
    fn mean_stderr() {
        let m = MeanStderr::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        // sample sd = sqrt(5/3), stderr = sd / 2
        assert!((m.stderr - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
        assert_eq!(MeanStderr::of(&[7.0]).stderr, 0.0);
    }

    #[test]
    fn scatter_single_and_pair() {
        let p = ScatterPoint::new("a", 20.2, 2.0);
        assert_eq!(p.gops_per_w, 20.2 / 2.0);
        let csv = scatter_csv(&[p.clone(), ScatterPoint::new("b,c", 1.0, 0.1)]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("\"b,c\""));
        let svg = scatter_svg(&[p, ScatterPoint::new("b", 1.0, 0.1)]);
        assert_eq!(svg.matches("class=\"point\"").count(), 2);
        assert!(svg.contains(">a</text>") && svg.contains(">b</text>"));
    }

    #[test]
    fn point_on_tera_op_diagonal() {
        let pts = [ScatterPoint::new("x", 1000.0, 1.0), ScatterPoint::new("y", 3.0, 0.01)];
        let f = LogFrame::fit(&pts);
        let ((x1, y1), (x2, y2)) = f.iso_line(1000.0).unwrap();
        let (px, py) = f.map(1.0, 1000.0);
        let cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
        assert!(cross.abs() < 1e-6, "{cross}");
        assert!(scatter_svg(&pts).contains("1 TOp/s/W"));
    }

    #[test]
    fn report_json_point() {
        let r = cnn_report();
        let p = ScatterPoint::from_report_json(&r.to_json()).unwrap();
        assert_eq!(p.name, "t");
        assert!((p.gops_per_w - r.fom.gops_per_w.unwrap()).abs() < 1e-9 * p.gops_per_w);
        assert!(ScatterPoint::from_report_json("{").is_err());
    }
}
