//! Delta-threshold GRU.
//!
//! Each step transmits only the input and hidden components whose change since
//! their last transmitted value exceeds `theta`, and adds the matching weight
//! columns into stored pre-activation accumulators. With `theta = 0` the
//! accumulated deltas telescope to exactly the dense pre-activations, so the
//! hidden trajectory matches [`gru_dense_oracle`] bit for bit.
//!
//! Gate equations:
//!
//! ```text
//! r  = sigmoid(W_xr x + W_hr h + b_r)
//! u  = sigmoid(W_xu x + W_hu h + b_u)
//! c  = tanh(W_xc x + b_c + r * (W_hc h))
//! h' = (1 - u) * c + u * h
//! ```
//!
//! Inputs and hidden states are Q8.8. Weights share one format (Q2.14 by
//! default). Accumulators hold `Σ w·x` at scale `2^(8 + w_frac)` in 64 bits,
//! and are saturated only when renormalized for the activation tables.

use std::sync::OnceLock;

use serde::Serialize;

use crate::codec::{encode_delta_into, DeltaStream};
use crate::error::{Error, Result};
use crate::fxp::{renormalize_wide, shift_round_even, OpCounter, QFormat, QScalar, QTensor};
use crate::mem::{AccessTag, AccessTrace, CostWalker, MemConfig, MemCostReport};
use crate::par;

/// Format of every GRU input, hidden state and gate value.
pub const ACT_FMT: QFormat = QFormat::Q8_8;
const ONE: i64 = 1 << 8;

/// Weight matrix stored column-major, so one delta event reads one
/// contiguous column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColMatrix {
    rows: usize,
    cols: usize,
    fmt: QFormat,
    data: Vec<i16>,
}

impl ColMatrix {
    /// From a row-major `(rows, cols)` tensor.
    pub fn from_row_major(t: &QTensor) -> Result<Self> {
        let [rows, cols] = t.dims()[..] else {
            return Err(Error::shape(format!("matrix must be rank 2, got {:?}", t.dims())));
        };
        let src = t.data();
        let mut data = vec![0i16; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(ColMatrix {
            rows,
            cols,
            fmt: t.fmt(),
            data,
        })
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&QTensor]) -> Result<Self> {
        let cols = parts.first().map(|p| p.dims().get(1).copied().unwrap_or(0)).unwrap_or(0);
        let mut rows_total = 0;
        for p in parts {
            if p.rank() != 2 || p.dims()[1] != cols || p.fmt() != parts[0].fmt() {
                return Err(Error::shape("stacked matrices must be rank 2 with equal columns and format"));
            }
            rows_total += p.dims()[0];
        }
        let mut data = vec![0i16; rows_total * cols];
        let mut r0 = 0;
        for p in parts {
            let rows = p.dims()[0];
            for r in 0..rows {
                for c in 0..cols {
                    data[c * rows_total + r0 + r] = p.data()[r * cols + c];
                }
            }
            r0 += rows;
        }
        Ok(ColMatrix {
            rows: rows_total,
            cols,
            fmt: parts[0].fmt(),
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn fmt(&self) -> QFormat {
        self.fmt
    }

    pub fn col(&self, c: usize) -> &[i16] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    pub fn get(&self, r: usize, c: usize) -> i16 {
        self.data[c * self.rows + r]
    }
}

/// `acc[j] += Σ_events W[j, idx] * value` for every row `j`. Counts
/// `rows * events` MACs.
pub fn delta_mxv_accumulate(w: &ColMatrix, deltas: &DeltaStream, acc: &mut [i64], ops: &mut OpCounter) -> Result<()> {
    if acc.len() != w.rows {
        return Err(Error::shape(format!(
            "accumulator length {} != matrix rows {}",
            acc.len(),
            w.rows
        )));
    }
    if let Some(e) = deltas.events.iter().find(|e| e.index as usize >= w.cols) {
        return Err(Error::IndexOutOfRange {
            index: e.index as usize,
            len: w.cols,
        });
    }
    scatter_columns(w, deltas, 0..w.rows, acc);
    ops.macs_executed += (w.rows * deltas.events.len()) as u64;
    Ok(())
}

/// Rows below this run on one thread; row chunks are independent.
const PAR_ROWS: usize = 4096;

/// Adds the event columns restricted to `rows` into `acc` (indexed from 0).
fn scatter_columns(w: &ColMatrix, deltas: &DeltaStream, rows: std::ops::Range<usize>, acc: &mut [i64]) {
    let n = rows.len();
    let body = |start: usize, chunk: &mut [i64]| {
        for e in &deltas.events {
            let col = &w.col(e.index as usize)[rows.start + start..rows.start + start + chunk.len()];
            let d = e.value as i64;
            for (a, &wv) in chunk.iter_mut().zip(col) {
                *a += wv as i64 * d;
            }
        }
    };
    if n >= PAR_ROWS && par::is_parallel() {
        let chunk = PAR_ROWS / 4;
        par::for_each_chunk_mut(acc, chunk, |ci, c| body(ci * chunk, c));
    } else {
        body(0, acc);
    }
}

/// 1025-point tables over Q8.8 inputs in `[-8, 8]`, step 1/64, with linear
/// interpolation between points. Outputs are Q8.8.
struct Tables {
    sigmoid: Vec<i16>,
    tanh: Vec<i16>,
}

const LUT_POINTS: usize = 1025;
const LUT_MIN: i32 = -2048; // -8.0 in Q8.8
const LUT_MAX: i32 = 2047;

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let q = |v: f64| (v * 256.0).round_ties_even() as i16;
        let xs = (0..LUT_POINTS).map(|i| -8.0 + i as f64 / 64.0);
        Tables {
            sigmoid: xs.clone().map(|x| q(1.0 / (1.0 + (-x).exp()))).collect(),
            tanh: xs.map(|x| q(x.tanh())).collect(),
        }
    })
}

fn lut(table: &[i16], x: i16) -> i16 {
    let x = (x as i32).clamp(LUT_MIN, LUT_MAX) - LUT_MIN;
    let idx = (x >> 2) as usize;
    let frac = (x & 3) as i64;
    let e0 = table[idx] as i64;
    let e1 = table[idx + 1] as i64;
    shift_round_even(e0 * 4 + (e1 - e0) * frac, 2) as i16
}

/// Table sigmoid on a Q8.8 input, Q8.8 output in `[0, 256]`.
pub fn sigmoid_q(x: i16) -> i16 {
    lut(&tables().sigmoid, x)
}

/// Table tanh on a Q8.8 input, Q8.8 output in `[-256, 256]`.
pub fn tanh_q(x: i16) -> i16 {
    lut(&tables().tanh, x)
}

/// One GRU layer. Row-major input matrices are kept for reference; the engine
/// uses column-major stacks `[W_xr; W_xu; W_xc]` and `[W_hr; W_hu; W_hc]`.
#[derive(Debug, Clone)]
pub struct GruLayerSpec {
    input_size: usize,
    hidden_size: usize,
    wx: ColMatrix,
    wh: ColMatrix,
    b_r: Vec<i32>,
    b_u: Vec<i32>,
    b_c: Vec<i32>,
    pub theta: QScalar,
}

/// Row-major matrices and accumulator-scale biases of one layer.
#[derive(Debug, Clone)]
pub struct GruWeights {
    pub w_xr: QTensor,
    pub w_xu: QTensor,
    pub w_xc: QTensor,
    pub w_hr: QTensor,
    pub w_hu: QTensor,
    pub w_hc: QTensor,
    pub b_r: Vec<i32>,
    pub b_u: Vec<i32>,
    pub b_c: Vec<i32>,
}

impl GruLayerSpec {
    pub fn new(weights: &GruWeights, theta: QScalar) -> Result<Self> {
        let w = weights;
        let [h, i] = w.w_xr.dims()[..] else {
            return Err(Error::shape(format!("W_xr must be rank 2, got {:?}", w.w_xr.dims())));
        };
        for (name, m, want) in [
            ("W_xu", &w.w_xu, [h, i]),
            ("W_xc", &w.w_xc, [h, i]),
            ("W_hr", &w.w_hr, [h, h]),
            ("W_hu", &w.w_hu, [h, h]),
            ("W_hc", &w.w_hc, [h, h]),
        ] {
            if m.dims() != want {
                return Err(Error::shape(format!("{name} has dims {:?}, expected {want:?}", m.dims())));
            }
            if m.fmt() != w.w_xr.fmt() {
                return Err(Error::shape(format!("{name} format {} differs from W_xr {}", m.fmt(), w.w_xr.fmt())));
            }
        }
        for (name, b) in [("b_r", &w.b_r), ("b_u", &w.b_u), ("b_c", &w.b_c)] {
            if b.len() != h {
                return Err(Error::shape(format!("{name} has {} entries, expected {h}", b.len())));
            }
        }
        if h == 0 || i == 0 {
            return Err(Error::shape("GRU sizes must be >= 1"));
        }
        if theta.raw < 0 || theta.fmt != ACT_FMT {
            return Err(Error::config(format!("theta must be a non-negative {ACT_FMT} value")));
        }
        Ok(GruLayerSpec {
            input_size: i,
            hidden_size: h,
            wx: ColMatrix::vstack(&[&w.w_xr, &w.w_xu, &w.w_xc])?,
            wh: ColMatrix::vstack(&[&w.w_hr, &w.w_hu, &w.w_hc])?,
            b_r: w.b_r.clone(),
            b_u: w.b_u.clone(),
            b_c: w.b_c.clone(),
            theta,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn w_fmt(&self) -> QFormat {
        self.wx.fmt
    }

    pub fn with_theta(&self, theta: QScalar) -> Result<Self> {
        if theta.raw < 0 || theta.fmt != ACT_FMT {
            return Err(Error::config(format!("theta must be a non-negative {ACT_FMT} value")));
        }
        Ok(GruLayerSpec { theta, ..self.clone() })
    }

    fn acc_frac(&self) -> u32 {
        ACT_FMT.frac_bits() as u32 + self.wx.fmt.frac_bits() as u32
    }

    /// Weight words a dense step reads: all six matrices.
    pub fn dense_weight_words(&self) -> u64 {
        (3 * self.hidden_size * (self.input_size + self.hidden_size)) as u64
    }

    pub fn dense_macs(&self) -> u64 {
        self.dense_weight_words()
    }

    /// DRAM layout: the two column stacks back to back.
    fn wx_addr(&self, base: u64, col: usize) -> u64 {
        base + (col * 3 * self.hidden_size) as u64
    }

    fn wh_addr(&self, base: u64, col: usize) -> u64 {
        base + (3 * self.hidden_size * (self.input_size + col)) as u64
    }
}

/// Per-layer recurrent state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaState {
    /// Last transmitted input.
    pub x_mem: Vec<i16>,
    /// Last transmitted hidden state.
    pub h_mem: Vec<i16>,
    /// Actual previous hidden output.
    pub h_prev: Vec<i16>,
    pub a_r: Vec<i64>,
    pub a_u: Vec<i64>,
    pub a_xc: Vec<i64>,
    pub a_hc: Vec<i64>,
}

impl DeltaState {
    /// Zero memories with biases preloaded into the accumulators.
    pub fn new(spec: &GruLayerSpec) -> Self {
        let h = spec.hidden_size;
        let wide = |b: &[i32]| b.iter().map(|&v| v as i64).collect::<Vec<_>>();
        DeltaState {
            x_mem: vec![0; spec.input_size],
            h_mem: vec![0; h],
            h_prev: vec![0; h],
            a_r: wide(&spec.b_r),
            a_u: wide(&spec.b_u),
            a_xc: wide(&spec.b_c),
            a_hc: vec![0; h],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepStats {
    pub input_events: u64,
    pub hidden_events: u64,
    pub macs: u64,
    pub weight_columns_fetched: u64,
    pub weight_words_fetched: u64,
}

/// Gate nonlinearities and state blend, shared by both engines so they differ
/// only in how pre-activations are accumulated.
fn gates(
    acc_frac: u32,
    a_r: &[i64],
    a_u: &[i64],
    a_xc: &[i64],
    a_hc: &[i64],
    h_prev: &[i16],
    ops: &mut OpCounter,
) -> Vec<i16> {
    let n = h_prev.len();
    let mut h = Vec::with_capacity(n);
    for j in 0..n {
        let r = sigmoid_q(renormalize_wide(a_r[j], acc_frac, ACT_FMT, ops)) as i64;
        let u = sigmoid_q(renormalize_wide(a_u[j], acc_frac, ACT_FMT, ops)) as i64;
        let cand = a_xc[j] + shift_round_even(r * a_hc[j], 8);
        let c = tanh_q(renormalize_wide(cand, acc_frac, ACT_FMT, ops)) as i64;
        let blend = (ONE - u) * c + u * h_prev[j] as i64;
        h.push(renormalize_wide(blend, 16, ACT_FMT, ops));
    }
    // r*a_hc, its add, (1-u), two products and their sum
    ops.adds += 6 * n as u64;
    h
}

fn check_seq(spec: &GruLayerSpec, x_seq: &QTensor) -> Result<usize> {
    let (t, i) = match x_seq.dims()[..] {
        [t, i] => (t, i),
        [i] if x_seq.is_empty() => (0, i),
        _ => return Err(Error::shape(format!("sequence must be (T, I), got {:?}", x_seq.dims()))),
    };
    if t > 0 && i != spec.input_size {
        return Err(Error::shape(format!("sequence width {i}, layer input size {}", spec.input_size)));
    }
    if x_seq.fmt() != ACT_FMT {
        return Err(Error::shape(format!("sequence format {}, expected {ACT_FMT}", x_seq.fmt())));
    }
    Ok(t)
}

fn dense_mxv(w: &ColMatrix, x: &[i16], rows: std::ops::Range<usize>, acc: &mut [i64]) {
    for (c, &xv) in x.iter().enumerate() {
        if xv == 0 {
            continue;
        }
        let col = &w.col(c)[rows.clone()];
        for (a, &wv) in acc.iter_mut().zip(col) {
            *a += wv as i64 * xv as i64;
        }
    }
}

/// Reference GRU: pre-activations recomputed densely from `x` and `h` each
/// step. Returns the hidden vector after every step.
pub fn gru_dense_oracle(spec: &GruLayerSpec, x_seq: &QTensor) -> Result<Vec<Vec<i16>>> {
    Ok(gru_dense_run(spec, x_seq)?.0)
}

/// [`gru_dense_oracle`] plus op counts (every weight used every step).
pub fn gru_dense_run(spec: &GruLayerSpec, x_seq: &QTensor) -> Result<(Vec<Vec<i16>>, OpCounter)> {
    let t_len = check_seq(spec, x_seq)?;
    let (i_n, h_n) = (spec.input_size, spec.hidden_size);
    let mut ops = OpCounter::default();
    let mut h = vec![0i16; h_n];
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x = &x_seq.data()[t * i_n..(t + 1) * i_n];
        let wide = |b: &[i32]| b.iter().map(|&v| v as i64).collect::<Vec<_>>();
        let (mut a_r, mut a_u, mut a_xc) = (wide(&spec.b_r), wide(&spec.b_u), wide(&spec.b_c));
        let mut a_hc = vec![0i64; h_n];
        dense_mxv(&spec.wx, x, 0..h_n, &mut a_r);
        dense_mxv(&spec.wx, x, h_n..2 * h_n, &mut a_u);
        dense_mxv(&spec.wx, x, 2 * h_n..3 * h_n, &mut a_xc);
        dense_mxv(&spec.wh, &h, 0..h_n, &mut a_r);
        dense_mxv(&spec.wh, &h, h_n..2 * h_n, &mut a_u);
        dense_mxv(&spec.wh, &h, 2 * h_n..3 * h_n, &mut a_hc);
        ops.macs_executed += spec.dense_macs();
        ops.macs_dense_equivalent += spec.dense_macs();
        h = gates(spec.acc_frac(), &a_r, &a_u, &a_xc, &a_hc, &h, &mut ops);
        out.push(h.clone());
    }
    Ok((out, ops))
}

/// DRAM/SRAM word addresses used by one layer's trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GruAddrs {
    pub weights: u64,
    pub input: u64,
    pub output: u64,
}

/// One delta step. Input and hidden deltas are both taken before any
/// accumulator changes; hidden deltas compare `h_prev` against `h_mem`.
pub fn deltagru_step(
    spec: &GruLayerSpec,
    state: &mut DeltaState,
    x: &[i16],
    ops: &mut OpCounter,
) -> Result<(Vec<i16>, StepStats)> {
    let mut dx = DeltaStream::new(spec.input_size);
    let mut dh = DeltaStream::new(spec.hidden_size);
    deltagru_step_traced(spec, state, x, ops, &mut dx, &mut dh, None)
}

fn deltagru_step_traced(
    spec: &GruLayerSpec,
    state: &mut DeltaState,
    x: &[i16],
    ops: &mut OpCounter,
    dx: &mut DeltaStream,
    dh: &mut DeltaStream,
    trace: Option<(&mut AccessTrace, &GruAddrs)>,
) -> Result<(Vec<i16>, StepStats)> {
    let (i_n, h_n) = (spec.input_size, spec.hidden_size);
    if x.len() != i_n {
        return Err(Error::shape(format!("input length {}, layer input size {i_n}", x.len())));
    }
    if state.x_mem.len() != i_n || state.h_mem.len() != h_n || state.a_r.len() != h_n {
        return Err(Error::shape("state does not match layer sizes"));
    }
    ops.comparisons += encode_delta_into(&mut state.x_mem, x, spec.theta.raw, dx);
    ops.comparisons += encode_delta_into(&mut state.h_mem, &state.h_prev, spec.theta.raw, dh);

    // x side: rows [r | u | xc] of each stacked column
    let mut acc_x: Vec<i64> = [&state.a_r[..], &state.a_u[..], &state.a_xc[..]].concat();
    delta_mxv_accumulate(&spec.wx, dx, &mut acc_x, ops)?;
    // h side: rows [r | u | hc]
    let mut acc_h: Vec<i64> = [&acc_x[..2 * h_n], &state.a_hc[..]].concat();
    delta_mxv_accumulate(&spec.wh, dh, &mut acc_h, ops)?;
    state.a_r.copy_from_slice(&acc_h[..h_n]);
    state.a_u.copy_from_slice(&acc_h[h_n..2 * h_n]);
    state.a_xc.copy_from_slice(&acc_x[2 * h_n..]);
    state.a_hc.copy_from_slice(&acc_h[2 * h_n..]);
    ops.macs_dense_equivalent += spec.dense_macs();

    let h = gates(spec.acc_frac(), &state.a_r, &state.a_u, &state.a_xc, &state.a_hc, &state.h_prev, ops);
    state.h_prev.copy_from_slice(&h);

    let events = (dx.events.len() + dh.events.len()) as u64;
    let stats = StepStats {
        input_events: dx.events.len() as u64,
        hidden_events: dh.events.len() as u64,
        macs: 3 * h_n as u64 * events,
        weight_columns_fetched: events,
        weight_words_fetched: 3 * h_n as u64 * events,
    };

    if let Some((tr, addrs)) = trace {
        tr.dram_read(AccessTag::Activations, addrs.input, i_n as u64);
        // memories for the threshold test, then the transmitted updates
        tr.sram_read(AccessTag::State, 0, (i_n + h_n) as u64);
        tr.sram_write(AccessTag::State, 0, events);
        for e in &dx.events {
            tr.dram_read(AccessTag::Weights, spec.wx_addr(addrs.weights, e.index as usize), 3 * h_n as u64);
        }
        for e in &dh.events {
            tr.dram_read(AccessTag::Weights, spec.wh_addr(addrs.weights, e.index as usize), 3 * h_n as u64);
        }
        // four 32-bit accumulators per unit, read and written back
        let acc_words = 8 * h_n as u64;
        tr.sram_read(AccessTag::State, (i_n + h_n) as u64, acc_words);
        tr.sram_write(AccessTag::State, (i_n + h_n) as u64, acc_words);
        tr.dram_write(AccessTag::Activations, addrs.output, h_n as u64);
    }
    Ok((h, stats))
}

/// Trace of one dense step: every weight word streamed in order.
fn dense_step_trace(spec: &GruLayerSpec, addrs: &GruAddrs, tr: &mut AccessTrace) {
    let (i_n, h_n) = (spec.input_size as u64, spec.hidden_size as u64);
    tr.dram_read(AccessTag::Activations, addrs.input, i_n);
    tr.dram_read(AccessTag::Weights, addrs.weights, spec.dense_weight_words());
    tr.dram_write(AccessTag::Activations, addrs.output, h_n);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GruMode {
    Dense,
    #[default]
    Delta,
}

/// Per-layer outcome of [`run_sequence`].
#[derive(Debug, Clone, Serialize)]
pub struct GruLayerStats {
    pub input_size: usize,
    pub hidden_size: usize,
    pub theta_raw: i16,
    pub counters: OpCounter,
    pub input_events: u64,
    pub hidden_events: u64,
    pub weight_words_fetched: u64,
    pub weight_words_dense: u64,
    /// Cost of the executed path.
    pub cost: MemCostReport,
    /// Cost a dense engine would pay for the same steps.
    pub dense_cost: MemCostReport,
    /// Per step, transmitted components over `I + H`.
    pub event_rate: Vec<f64>,
}

impl GruLayerStats {
    /// Dense-equivalent weight words over fetched ones; `None` if nothing fetched.
    pub fn weight_reduction(&self) -> Option<f64> {
        ratio(self.weight_words_dense, self.weight_words_fetched)
    }

    pub fn traffic_reduction(&self) -> Option<f64> {
        ratio(self.dense_cost.dram_words, self.cost.dram_words)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone)]
pub struct GruRun {
    /// Last layer's hidden vector after each step, as `(T, H)`.
    pub outputs: QTensor,
    pub layers: Vec<GruLayerStats>,
}

impl GruRun {
    pub fn weight_words_fetched(&self) -> u64 {
        self.layers.iter().map(|l| l.weight_words_fetched).sum()
    }

    pub fn weight_words_dense(&self) -> u64 {
        self.layers.iter().map(|l| l.weight_words_dense).sum()
    }

    pub fn weight_reduction(&self) -> Option<f64> {
        ratio(self.weight_words_dense(), self.weight_words_fetched())
    }

    pub fn traffic_reduction(&self) -> Option<f64> {
        let dense: u64 = self.layers.iter().map(|l| l.dense_cost.dram_words).sum();
        let got: u64 = self.layers.iter().map(|l| l.cost.dram_words).sum();
        ratio(dense, got)
    }

    /// Mean over steps and layers of the per-step event rate.
    pub fn mean_event_rate(&self) -> f64 {
        let all: Vec<f64> = self.layers.iter().flat_map(|l| l.event_rate.iter().copied()).collect();
        if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        }
    }
}

pub const GRU_WEIGHT_BASE: u64 = 1 << 30;
const GRU_ACT_BASE: u64 = 1 << 24;

/// Runs stacked layers over a `(T, I)` sequence.
pub fn run_sequence(layers: &[GruLayerSpec], x_seq: &QTensor, mode: GruMode, cfg: &MemConfig) -> Result<GruRun> {
    let first = layers.first().ok_or_else(|| Error::config("network has no layers"))?;
    let t_len = check_seq(first, x_seq)?;
    for (k, pair) in layers.windows(2).enumerate() {
        if pair[1].input_size != pair[0].hidden_size {
            return Err(Error::shape(format!(
                "layer {} input size {} != layer {k} hidden size {}",
                k + 1,
                pair[1].input_size,
                pair[0].hidden_size
            )));
        }
    }
    let mut cur = x_seq.clone();
    let mut stats = Vec::with_capacity(layers.len());
    let mut weight_base = GRU_WEIGHT_BASE;
    for (l, spec) in layers.iter().enumerate() {
        let addrs = GruAddrs {
            weights: weight_base,
            input: (l as u64 % 2) * GRU_ACT_BASE,
            output: ((l as u64 + 1) % 2) * GRU_ACT_BASE,
        };
        weight_base += spec.dense_weight_words();
        let (outs, st) = match mode {
            GruMode::Delta => run_layer_delta(spec, &cur, t_len, &addrs, cfg)?,
            GruMode::Dense => run_layer_dense(spec, &cur, t_len, &addrs, cfg)?,
        };
        let flat: Vec<i16> = outs.concat();
        cur = if t_len == 0 {
            QTensor::new(vec![0, spec.hidden_size], ACT_FMT, flat)?
        } else {
            QTensor::new(vec![t_len, spec.hidden_size], ACT_FMT, flat)?
        };
        stats.push(st);
    }
    Ok(GruRun {
        outputs: cur,
        layers: stats,
    })
}

fn dense_cost(spec: &GruLayerSpec, t_len: usize, addrs: &GruAddrs, cfg: &MemConfig) -> MemCostReport {
    let mut tr = AccessTrace::new();
    dense_step_trace(spec, addrs, &mut tr);
    let mut walker = CostWalker::new(cfg);
    for _ in 0..t_len {
        walker.feed(&tr);
    }
    walker.report()
}

fn run_layer_delta(
    spec: &GruLayerSpec,
    xs: &QTensor,
    t_len: usize,
    addrs: &GruAddrs,
    cfg: &MemConfig,
) -> Result<(Vec<Vec<i16>>, GruLayerStats)> {
    let mut state = DeltaState::new(spec);
    let mut ops = OpCounter::default();
    let mut walker = CostWalker::new(cfg);
    let mut tr = AccessTrace::new();
    let (mut dx, mut dh) = (DeltaStream::new(spec.input_size), DeltaStream::new(spec.hidden_size));
    let mut outs = Vec::with_capacity(t_len);
    let mut st = GruLayerStats {
        input_size: spec.input_size,
        hidden_size: spec.hidden_size,
        theta_raw: spec.theta.raw,
        counters: OpCounter::default(),
        input_events: 0,
        hidden_events: 0,
        weight_words_fetched: 0,
        weight_words_dense: spec.dense_weight_words() * t_len as u64,
        cost: MemCostReport::default(),
        dense_cost: dense_cost(spec, t_len, addrs, cfg),
        event_rate: Vec::with_capacity(t_len),
    };
    let i_n = spec.input_size;
    for t in 0..t_len {
        tr.events.clear();
        let x = &xs.data()[t * i_n..(t + 1) * i_n];
        let (h, s) = deltagru_step_traced(spec, &mut state, x, &mut ops, &mut dx, &mut dh, Some((&mut tr, addrs)))?;
        walker.feed(&tr);
        st.input_events += s.input_events;
        st.hidden_events += s.hidden_events;
        st.weight_words_fetched += s.weight_words_fetched;
        st.event_rate
            .push((s.input_events + s.hidden_events) as f64 / (spec.input_size + spec.hidden_size) as f64);
        outs.push(h);
    }
    st.counters = ops;
    st.cost = walker.report();
    Ok((outs, st))
}

fn run_layer_dense(
    spec: &GruLayerSpec,
    xs: &QTensor,
    t_len: usize,
    addrs: &GruAddrs,
    cfg: &MemConfig,
) -> Result<(Vec<Vec<i16>>, GruLayerStats)> {
    let (outs, ops) = gru_dense_run(spec, xs)?;
    let cost = dense_cost(spec, t_len, addrs, cfg);
    let words = spec.dense_weight_words() * t_len as u64;
    let st = GruLayerStats {
        input_size: spec.input_size,
        hidden_size: spec.hidden_size,
        theta_raw: spec.theta.raw,
        counters: ops,
        input_events: (spec.input_size * t_len) as u64,
        hidden_events: (spec.hidden_size * t_len) as u64,
        weight_words_fetched: words,
        weight_words_dense: words,
        cost,
        dense_cost: cost,
        event_rate: vec![1.0; t_len],
    };
    Ok((outs, st))
}
