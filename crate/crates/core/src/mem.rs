//! Memory access traces and their cost.
//!
//! DRAM is a single rank with one open row. An in-row word costs
//! `cycles_seq_word`; touching any other row first pays
//! `row_change_factor * cycles_seq_word` to activate it. SRAM words cost no
//! cycles but carry energy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Dram,
    Sram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}

/// What the accessed words hold. `Scratch` marks intermediate full-resolution
/// maps that a fused pipeline never materializes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessTag {
    Weights,
    Activations,
    State,
    Scratch,
}

impl AccessTag {
    pub const ALL: [AccessTag; 4] = [
        AccessTag::Weights,
        AccessTag::Activations,
        AccessTag::State,
        AccessTag::Scratch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AccessTag::Weights => "weights",
            AccessTag::Activations => "activations",
            AccessTag::State => "state",
            AccessTag::Scratch => "scratch",
        }
    }
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Dram => "dram",
            Region::Sram => "sram",
        }
    }
}

impl AccessKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
        }
    }
}

/// A run of `words` consecutive word addresses starting at `addr`. A run is
/// costed exactly as that many single-word accesses in address order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub region: Region,
    pub addr: u64,
    pub words: u64,
    pub kind: AccessKind,
    pub tag: AccessTag,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessTrace {
    pub events: Vec<AccessEvent>,
}

impl AccessTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, region: Region, kind: AccessKind, tag: AccessTag, addr: u64, words: u64) {
        if words == 0 {
            return;
        }
        self.events.push(AccessEvent {
            region,
            addr,
            words,
            kind,
            tag,
        });
    }

    pub fn dram_read(&mut self, tag: AccessTag, addr: u64, words: u64) {
        self.push(Region::Dram, AccessKind::Read, tag, addr, words);
    }

    pub fn dram_write(&mut self, tag: AccessTag, addr: u64, words: u64) {
        self.push(Region::Dram, AccessKind::Write, tag, addr, words);
    }

    pub fn sram_read(&mut self, tag: AccessTag, addr: u64, words: u64) {
        self.push(Region::Sram, AccessKind::Read, tag, addr, words);
    }

    pub fn sram_write(&mut self, tag: AccessTag, addr: u64, words: u64) {
        self.push(Region::Sram, AccessKind::Write, tag, addr, words);
    }

    pub fn append(&mut self, other: &mut AccessTrace) {
        self.events.append(&mut other.events);
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Total words matching a predicate.
    pub fn words_where(&self, f: impl Fn(&AccessEvent) -> bool) -> u64 {
        self.events.iter().filter(|e| f(e)).map(|e| e.words).sum()
    }

    /// One CSV row per word: `region,address,kind,tag`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("region,address,kind,tag\n");
        for e in &self.events {
            for a in e.addr..e.addr + e.words {
                let _ = writeln!(s, "{},{},{},{}", e.region.as_str(), a, e.kind.as_str(), e.tag.as_str());
            }
        }
        s
    }

    /// Parses [`AccessTrace::to_csv`] output, merging consecutive addresses
    /// with identical attributes back into runs.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut t = AccessTrace::new();
        let mut offset = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let line_start = offset;
            offset += line.len() + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (lineno == 0 && line.starts_with("region")) {
                continue;
            }
            let bad = |what: &str| Error::malformed(line_start, format!("line {}: {what}", lineno + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad("expected region,address,kind,tag"));
            }
            let region = match f[0] {
                "dram" => Region::Dram,
                "sram" => Region::Sram,
                _ => return Err(bad("unknown region")),
            };
            let addr: u64 = f[1].parse().map_err(|_| bad("bad address"))?;
            let kind = match f[2] {
                "read" => AccessKind::Read,
                "write" => AccessKind::Write,
                _ => return Err(bad("unknown kind")),
            };
            let tag = AccessTag::ALL
                .into_iter()
                .find(|t| t.as_str() == f[3])
                .ok_or_else(|| bad("unknown tag"))?;
            match t.events.last_mut() {
                Some(last)
                    if last.region == region
                        && last.kind == kind
                        && last.tag == tag
                        && last.addr + last.words == addr =>
                {
                    last.words += 1
                }
                _ => t.push(region, kind, tag, addr, 1),
            }
        }
        Ok(t)
    }
}

/// DRAM/SRAM cost parameters. Energy values and the clock are configuration,
/// not measured data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemConfig {
    pub words_per_row: u64,
    pub burst_len: u64,
    pub cycles_seq_word: f64,
    pub row_change_factor: f64,
    pub e_dram_word: f64,
    pub e_sram_word: f64,
    pub e_mac: f64,
    /// Clock used to turn cycles into seconds.
    pub clock_hz: f64,
    /// MAC units working in parallel, for the compute side of the time model.
    pub mac_units: u64,
}

impl Default for MemConfig {
    fn default() -> Self {
        MemConfig {
            words_per_row: 1024,
            burst_len: 8,
            cycles_seq_word: 1.0,
            row_change_factor: 50.0,
            e_dram_word: 100.0,
            e_sram_word: 5.0,
            e_mac: 1.0,
            clock_hz: 500e6,
            mac_units: 128,
        }
    }
}

impl MemConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("cycles_seq_word", self.cycles_seq_word),
            ("e_dram_word", self.e_dram_word),
            ("e_sram_word", self.e_sram_word),
            ("e_mac", self.e_mac),
            ("clock_hz", self.clock_hz),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.words_per_row == 0 || self.burst_len == 0 || self.mac_units == 0 {
            return Err(Error::config("words_per_row, burst_len and mac_units must be positive"));
        }
        if !(self.row_change_factor >= 1.0 && self.row_change_factor.is_finite()) {
            return Err(Error::config("row_change_factor must be >= 1"));
        }
        Ok(())
    }

    /// Which fields differ from the built-in defaults; used for report provenance.
    pub fn provenance(&self) -> ConfigProvenance {
        let d = MemConfig::default();
        ConfigProvenance {
            row_change_factor: if self.row_change_factor == d.row_change_factor {
                "literature-derived (DDR3 row change ~50x a burst word)"
            } else {
                "user-config"
            },
            energy: if (self.e_dram_word, self.e_sram_word, self.e_mac) == (d.e_dram_word, d.e_sram_word, d.e_mac) {
                "default-config (not measured)"
            } else {
                "user-config"
            },
            timing: if (self.clock_hz, self.mac_units, self.cycles_seq_word) == (d.clock_hz, d.mac_units, d.cycles_seq_word) {
                "default-config (not measured)"
            } else {
                "user-config"
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigProvenance {
    pub row_change_factor: &'static str,
    pub energy: &'static str,
    pub timing: &'static str,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TagCost {
    pub dram_words: u64,
    pub sram_words: u64,
    pub row_activations: u64,
    pub cycles: f64,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TagBreakdown {
    pub weights: TagCost,
    pub activations: TagCost,
    pub state: TagCost,
    pub scratch: TagCost,
}

impl TagBreakdown {
    pub fn get(&self, tag: AccessTag) -> &TagCost {
        match tag {
            AccessTag::Weights => &self.weights,
            AccessTag::Activations => &self.activations,
            AccessTag::State => &self.state,
            AccessTag::Scratch => &self.scratch,
        }
    }

    fn get_mut(&mut self, tag: AccessTag) -> &mut TagCost {
        match tag {
            AccessTag::Weights => &mut self.weights,
            AccessTag::Activations => &mut self.activations,
            AccessTag::State => &mut self.state,
            AccessTag::Scratch => &mut self.scratch,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MemCostReport {
    pub cycles: f64,
    pub row_activations: u64,
    pub dram_words: u64,
    pub sram_words: u64,
    pub dram_bursts: u64,
    pub energy_pj: f64,
    pub per_tag: TagBreakdown,
}

impl MemCostReport {
    /// Sums two reports as if costed separately (no seam effects).
    pub fn merge(&mut self, o: &MemCostReport) {
        self.cycles += o.cycles;
        self.row_activations += o.row_activations;
        self.dram_words += o.dram_words;
        self.sram_words += o.sram_words;
        self.dram_bursts += o.dram_bursts;
        self.energy_pj += o.energy_pj;
        for tag in AccessTag::ALL {
            let a = self.per_tag.get_mut(tag);
            let b = o.per_tag.get(tag);
            a.dram_words += b.dram_words;
            a.sram_words += b.sram_words;
            a.row_activations += b.row_activations;
            a.cycles += b.cycles;
            a.energy_pj += b.energy_pj;
        }
    }
}

/// Incremental form of [`cost_trace`]: keeps the open row between traces so a
/// long run can be costed piecewise without materializing one huge trace.
#[derive(Debug, Clone)]
pub struct CostWalker<'a> {
    cfg: &'a MemConfig,
    open_row: Option<u64>,
    per_tag: TagBreakdown,
    bursts: u64,
}

impl<'a> CostWalker<'a> {
    pub fn new(cfg: &'a MemConfig) -> Self {
        CostWalker {
            cfg,
            open_row: None,
            per_tag: TagBreakdown::default(),
            bursts: 0,
        }
    }

    /// Costs each run in O(1).
    pub fn feed(&mut self, trace: &AccessTrace) {
        let cfg = self.cfg;
        let row_cost = cfg.row_change_factor * cfg.cycles_seq_word;
        for e in &trace.events {
            let t = self.per_tag.get_mut(e.tag);
            match e.region {
                Region::Sram => {
                    t.sram_words += e.words;
                    t.energy_pj += e.words as f64 * cfg.e_sram_word;
                }
                Region::Dram => {
                    let first = e.addr / cfg.words_per_row;
                    let last = (e.addr + e.words - 1) / cfg.words_per_row;
                    let mut acts = last - first;
                    if self.open_row != Some(first) {
                        acts += 1;
                    }
                    self.open_row = Some(last);
                    // bursts are aligned to burst_len words
                    self.bursts += (e.addr + e.words - 1) / cfg.burst_len - e.addr / cfg.burst_len + 1;
                    t.dram_words += e.words;
                    t.row_activations += acts;
                    t.cycles += e.words as f64 * cfg.cycles_seq_word + acts as f64 * row_cost;
                    t.energy_pj += e.words as f64 * cfg.e_dram_word;
                }
            }
        }
    }

    pub fn report(&self) -> MemCostReport {
        let cfg = self.cfg;
        let mut rep = MemCostReport {
            per_tag: self.per_tag,
            dram_bursts: self.bursts,
            ..Default::default()
        };
        for tag in AccessTag::ALL {
            let t = self.per_tag.get(tag);
            rep.dram_words += t.dram_words;
            rep.sram_words += t.sram_words;
            rep.row_activations += t.row_activations;
        }
        // recomputed from integer totals so the cycle identity holds exactly
        rep.cycles = rep.dram_words as f64 * cfg.cycles_seq_word
            + rep.row_activations as f64 * cfg.row_change_factor * cfg.cycles_seq_word;
        rep.energy_pj = rep.dram_words as f64 * cfg.e_dram_word + rep.sram_words as f64 * cfg.e_sram_word;
        rep
    }
}

/// Walks the DRAM events keeping one open row.
pub fn cost_trace(trace: &AccessTrace, cfg: &MemConfig) -> MemCostReport {
    let mut w = CostWalker::new(cfg);
    w.feed(trace);
    w.report()
}

/// Fully sequential read of a `rows x cols` weight region starting at word 0.
pub fn schedule_dense_weight_stream(rows: usize, cols: usize, _cfg: &MemConfig) -> AccessTrace {
    let mut t = AccessTrace::new();
    t.dram_read(AccessTag::Weights, 0, (rows * cols) as u64);
    t
}

/// `n` single-word reads, each landing in a different row.
pub fn scattered_trace(n_words: u64, cfg: &MemConfig) -> AccessTrace {
    let mut t = AccessTrace::new();
    for i in 0..n_words {
        t.dram_read(AccessTag::Weights, i * cfg.words_per_row, 1);
    }
    t
}

/// Cycles of worst-case scattered access over cycles of one sequential stream
/// of the same number of words.
pub fn random_vs_burst_ratio(n_words: u64, cfg: &MemConfig) -> Result<f64> {
    if n_words == 0 {
        return Err(Error::config("n_words must be > 0"));
    }
    let mut seq = AccessTrace::new();
    seq.dram_read(AccessTag::Weights, 0, n_words);
    let s = cost_trace(&seq, cfg).cycles;
    let r = cost_trace(&scattered_trace(n_words, cfg), cfg).cycles;
    Ok(r / s)
}

/// Energy split by source, in picojoules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub mac_pj: f64,
    pub dram_pj: f64,
    pub sram_pj: f64,
    pub total_pj: f64,
}

pub fn energy_breakdown(macs: u64, cost: &MemCostReport, cfg: &MemConfig) -> EnergyBreakdown {
    let mac_pj = macs as f64 * cfg.e_mac;
    let dram_pj = cost.dram_words as f64 * cfg.e_dram_word;
    let sram_pj = cost.sram_words as f64 * cfg.e_sram_word;
    EnergyBreakdown {
        mac_pj,
        dram_pj,
        sram_pj,
        total_pj: mac_pj + dram_pj + sram_pj,
    }
}

/// Synaptic power budget `power = rate * fanout * neurons * energy_per_event`.
/// Exactly one field may be `None`; [`BrainBudget::solve`] fills it in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BrainBudget {
    pub rate_hz: Option<f64>,
    pub fanout: Option<f64>,
    pub neurons: Option<f64>,
    pub energy_per_syn_j: Option<f64>,
    pub power_w: Option<f64>,
}

/// The five quantities with every value known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolvedBudget {
    pub rate_hz: f64,
    pub fanout: f64,
    pub neurons: f64,
    pub energy_per_syn_j: f64,
    pub power_w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetField {
    Rate,
    Fanout,
    Neurons,
    EnergyPerSyn,
    Power,
}

impl BudgetField {
    pub fn unit(self) -> &'static str {
        match self {
            BudgetField::Rate => "Hz",
            BudgetField::Fanout => "synapses/neuron",
            BudgetField::Neurons => "neurons",
            BudgetField::EnergyPerSyn => "J",
            BudgetField::Power => "W",
        }
    }
}

pub fn brain_budget(rate_hz: f64, fanout: f64, neurons: f64, energy_per_syn_j: f64) -> Result<f64> {
    for (n, v) in [("rate", rate_hz), ("fanout", fanout), ("neurons", neurons), ("energy", energy_per_syn_j)] {
        check_positive(n, v)?;
    }
    Ok(rate_hz * fanout * neurons * energy_per_syn_j)
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl BrainBudget {
    pub fn solve(&self) -> Result<(BudgetField, SolvedBudget)> {
        let fields = [
            (BudgetField::Rate, self.rate_hz),
            (BudgetField::Fanout, self.fanout),
            (BudgetField::Neurons, self.neurons),
            (BudgetField::EnergyPerSyn, self.energy_per_syn_j),
            (BudgetField::Power, self.power_w),
        ];
        let unknown: Vec<BudgetField> = fields.iter().filter(|f| f.1.is_none()).map(|f| f.0).collect();
        if unknown.len() != 1 {
            return Err(Error::Underdetermined(format!(
                "exactly one unknown required, got {}",
                unknown.len()
            )));
        }
        for (f, v) in fields {
            if let Some(v) = v {
                check_positive(&format!("{f:?}"), v)?;
            }
        }
        let missing = unknown[0];
        let known_product: f64 = fields
            .iter()
            .filter(|f| f.0 != BudgetField::Power)
            .filter_map(|f| f.1)
            .product();
        let mut s = SolvedBudget {
            rate_hz: self.rate_hz.unwrap_or(0.0),
            fanout: self.fanout.unwrap_or(0.0),
            neurons: self.neurons.unwrap_or(0.0),
            energy_per_syn_j: self.energy_per_syn_j.unwrap_or(0.0),
            power_w: self.power_w.unwrap_or(0.0),
        };
        let value = match missing {
            BudgetField::Power => known_product,
            _ => s.power_w / known_product,
        };
        match missing {
            BudgetField::Rate => s.rate_hz = value,
            BudgetField::Fanout => s.fanout = value,
            BudgetField::Neurons => s.neurons = value,
            BudgetField::EnergyPerSyn => s.energy_per_syn_j = value,
            BudgetField::Power => s.power_w = value,
        }
        Ok((missing, s))
    }
}

impl SolvedBudget {
    pub fn get(&self, f: BudgetField) -> f64 {
        match f {
            BudgetField::Rate => self.rate_hz,
            BudgetField::Fanout => self.fanout,
            BudgetField::Neurons => self.neurons,
            BudgetField::EnergyPerSyn => self.energy_per_syn_j,
            BudgetField::Power => self.power_w,
        }
    }
}
