//! Zero-skipping convolution over compressed feature maps.
//!
//! The sparse engine is input-stationary: it walks the non-zero pixels of the
//! input map in canonical order and scatters each one into the 32-bit output
//! accumulators it touches. For any single accumulator the contributing pixels
//! arrive in `(in_c, ky, kx)` order, the same order the dense reference uses,
//! so saturating accumulation gives bit-identical results.
//!
//! Padding is logical. Padded zeros are never stored or visited, but the
//! dense-equivalent MAC count includes them.

use serde::{Deserialize, Serialize};

use crate::codec::{encode_sm, measure_sparsity, measure_sparsity_sm, SparseFeatureMap, SparsityStats};
use crate::error::{Error, Result};
use crate::fxp::{mac_accumulate, renormalize_wide, OpCounter, QFormat, QTensor};
use crate::mem::{AccessTag, AccessTrace};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    #[default]
    None,
    /// 2x2 window, stride 2, odd trailing rows/columns dropped.
    Max2x2,
}

impl std::str::FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "" => Ok(Pool::None),
            "max2x2" | "max2x2-stride2" => Ok(Pool::Max2x2),
            other => Err(Error::config(format!("unsupported pooling {other:?}, only max2x2"))),
        }
    }
}

/// One convolution layer with its fixed-point parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    /// `(out_c, in_c, kh, kw)`.
    pub weights: QTensor,
    /// Per output channel, at accumulator scale `2^(in_frac + w_frac)`.
    pub bias: Vec<i32>,
    pub relu: bool,
    pub pool: Pool,
    pub in_fmt: QFormat,
    pub out_fmt: QFormat,
}

impl ConvLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::config("stride and kernel dims must be >= 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("channel counts must be >= 1"));
        }
        let want = [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w];
        if self.weights.dims() != want {
            return Err(Error::shape(format!(
                "weights have dims {:?}, layer needs {want:?}",
                self.weights.dims()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::shape(format!(
                "bias has {} entries for {} output channels",
                self.bias.len(),
                self.out_channels
            )));
        }
        Ok(())
    }

    pub fn w_fmt(&self) -> QFormat {
        self.weights.fmt()
    }

    /// Fractional bits of the accumulator.
    pub fn acc_frac(&self) -> u32 {
        self.in_fmt.frac_bits() as u32 + self.w_fmt().frac_bits() as u32
    }

    /// Spatial size before pooling.
    pub fn conv_out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.kernel_h || wp < self.kernel_w {
            return Err(Error::shape(format!(
                "padded input {hp}x{wp} smaller than kernel {}x{}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok(((hp - self.kernel_h) / self.stride + 1, (wp - self.kernel_w) / self.stride + 1))
    }

    /// Final output `(C, H, W)` including pooling.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let (ho, wo) = self.conv_out_dims(h, w)?;
        match self.pool {
            Pool::None => Ok((self.out_channels, ho, wo)),
            Pool::Max2x2 if ho >= 2 && wo >= 2 => Ok((self.out_channels, ho / 2, wo / 2)),
            Pool::Max2x2 => Err(Error::shape(format!("conv output {ho}x{wo} too small for 2x2 pooling"))),
        }
    }

    /// MACs a dense engine performs, padded positions included.
    pub fn dense_macs(&self, h: usize, w: usize) -> Result<u64> {
        let (ho, wo) = self.conv_out_dims(h, w)?;
        Ok((ho * wo * self.out_channels * self.kernel_h * self.kernel_w * self.in_channels) as u64)
    }

    fn check_input(&self, dims: (usize, usize, usize), fmt: QFormat) -> Result<()> {
        self.validate()?;
        if dims.0 != self.in_channels {
            return Err(Error::shape(format!(
                "input has {} channels, layer expects {}",
                dims.0, self.in_channels
            )));
        }
        if fmt != self.in_fmt {
            return Err(Error::shape(format!("input format {fmt}, layer expects {}", self.in_fmt)));
        }
        self.out_dims(dims.1, dims.2).map(|_| ())
    }

    #[inline]
    fn weight(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> i16 {
        self.weights.data()[((oc * self.in_channels + ic) * self.kernel_h + ky) * self.kernel_w + kx]
    }

    /// Output positions along one axis reached by input coordinate `i`, as
    /// `(kernel offset, output index)` pairs.
    #[inline]
    fn taps(&self, i: usize, k: usize, out: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let base = (i + self.pad) as isize;
        let s = self.stride as isize;
        (0..k).filter_map(move |kk| {
            let t = base - kk as isize;
            (t >= 0 && t % s == 0 && ((t / s) as usize) < out).then(|| (kk, (t / s) as usize))
        })
    }

    fn weight_words(&self) -> u64 {
        (self.out_channels * self.in_channels * self.kernel_h * self.kernel_w) as u64
    }
}

/// Engine options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvOptions {
    /// Apply ReLU and pooling on the accumulators before anything is written.
    /// When false, the full-resolution post-ReLU map goes through DRAM scratch.
    pub fuse_pool: bool,
}

impl Default for ConvOptions {
    fn default() -> Self {
        ConvOptions { fuse_pool: true }
    }
}

/// DRAM word addresses of the buffers a layer touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerAddrs {
    pub input: u64,
    pub output: u64,
    pub weights: u64,
    pub scratch: u64,
}

#[derive(Debug, Clone)]
pub struct LayerRunResult {
    pub output: SparseFeatureMap,
    pub counters: OpCounter,
    pub accesses: AccessTrace,
    pub input_sparsity: SparsityStats,
    pub output_sparsity: SparsityStats,
    /// Inner-loop pixel iterations; equals `nnz(input) * out_channels`.
    pub pixel_visits: u64,
}

impl LayerRunResult {
    /// Dense-equivalent over executed MACs, `None` when nothing executed.
    pub fn efficiency(&self) -> Option<f64> {
        self.counters.efficiency()
    }
}

/// ReLU then 2x2/2 max over one accumulator plane, in a single pass.
/// Returns the (possibly pooled) plane and its dimensions.
pub fn fused_relu_pool(
    plane: &[i32],
    h: usize,
    w: usize,
    relu: bool,
    pool: Pool,
    ops: &mut OpCounter,
) -> (Vec<i32>, usize, usize) {
    debug_assert_eq!(plane.len(), h * w);
    let act = |v: i32| if relu { v.max(0) } else { v };
    match pool {
        Pool::None => {
            if relu {
                ops.comparisons += plane.len() as u64;
            }
            (plane.iter().map(|&v| act(v)).collect(), h, w)
        }
        Pool::Max2x2 => {
            let (ph, pw) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(ph * pw);
            for py in 0..ph {
                for px in 0..pw {
                    let r0 = 2 * py * w + 2 * px;
                    let m = plane[r0].max(plane[r0 + 1]).max(plane[r0 + w]).max(plane[r0 + w + 1]);
                    out.push(act(m));
                }
            }
            // 3 for the window max, 1 for the clamp
            ops.comparisons += (ph * pw) as u64 * if relu { 4 } else { 3 };
            (out, ph, pw)
        }
    }
}

/// Applies activation/pooling to one accumulator plane and renormalizes it.
/// Max and ReLU commute with the monotone renormalization, so working on the
/// accumulators gives the same result as working on the 16-bit values.
fn finish_plane(spec: &ConvLayerSpec, acc: &[i32], ho: usize, wo: usize, ops: &mut OpCounter) -> Vec<i16> {
    let (pooled, _, _) = fused_relu_pool(acc, ho, wo, spec.relu, spec.pool, ops);
    pooled
        .into_iter()
        .map(|a| renormalize_wide(a as i64, spec.acc_frac(), spec.out_fmt, ops))
        .collect()
}

/// Naive direct convolution: for each output, `in_c` outer then `ky`, `kx`.
pub fn conv_dense_oracle(spec: &ConvLayerSpec, input: &QTensor) -> Result<(QTensor, OpCounter)> {
    if input.rank() != 3 {
        return Err(Error::shape(format!("conv input must be rank 3, got {:?}", input.dims())));
    }
    let (c, h, w) = input.chw();
    spec.check_input((c, h, w), input.fmt())?;
    let (ho, wo) = spec.conv_out_dims(h, w)?;
    let (oc_n, ph, pw) = spec.out_dims(h, w)?;
    let x = input.data();
    let mut ops = OpCounter {
        macs_dense_equivalent: spec.dense_macs(h, w)?,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(oc_n * ph * pw);
    let mut plane = vec![0i32; ho * wo];
    for oc in 0..oc_n {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = spec.bias[oc];
                for ic in 0..spec.in_channels {
                    for ky in 0..spec.kernel_h {
                        for kx in 0..spec.kernel_w {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            let v = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                x[(ic * h + iy as usize) * w + ix as usize]
                            } else {
                                0
                            };
                            acc = mac_accumulate(acc, v, spec.weight(oc, ic, ky, kx), &mut ops);
                        }
                    }
                }
                plane[oy * wo + ox] = acc;
            }
        }
        out.extend(finish_plane(spec, &plane, ho, wo, &mut ops));
    }
    Ok((QTensor::new(vec![oc_n, ph, pw], spec.out_fmt, out)?, ops))
}

/// Zero-skipping convolution over a compressed map.
pub fn conv_zeroskip(spec: &ConvLayerSpec, input: &SparseFeatureMap) -> Result<LayerRunResult> {
    conv_zeroskip_with(spec, input, &ConvOptions::default(), &LayerAddrs::default())
}

pub fn conv_zeroskip_with(
    spec: &ConvLayerSpec,
    input: &SparseFeatureMap,
    opts: &ConvOptions,
    addrs: &LayerAddrs,
) -> Result<LayerRunResult> {
    input.validate()?;
    let (c, h, w) = input.dims();
    spec.check_input((c, h, w), input.fmt())?;
    let (ho, wo) = spec.conv_out_dims(h, w)?;
    let (oc_n, ph, pw) = spec.out_dims(h, w)?;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);

    // One task per output channel; each owns its accumulator plane.
    let per_channel = par::map_indexed(oc_n, |oc| {
        let mut ops = OpCounter::default();
        let mut acc = vec![spec.bias[oc]; ho * wo];
        let mut visits = 0u64;
        for px in input.nonzero_iter() {
            visits += 1;
            for (ky, oy) in spec.taps(px.y, kh, ho) {
                let row = oy * wo;
                for (kx, ox) in spec.taps(px.x, kw, wo) {
                    let a = &mut acc[row + ox];
                    *a = mac_accumulate(*a, px.value, spec.weight(oc, px.c, ky, kx), &mut ops);
                }
            }
        }
        let out = if opts.fuse_pool {
            finish_plane(spec, &acc, ho, wo, &mut ops)
        } else {
            // unfused: ReLU on the full plane first, then pool in a second pass
            let (relu_plane, _, _) = fused_relu_pool(&acc, ho, wo, spec.relu, Pool::None, &mut ops);
            let (pooled, _, _) = fused_relu_pool(&relu_plane, ho, wo, false, spec.pool, &mut ops);
            let scratch_nnz = relu_plane.iter().filter(|&&v| v != 0).count();
            let out = pooled
                .into_iter()
                .map(|a| renormalize_wide(a as i64, spec.acc_frac(), spec.out_fmt, &mut ops))
                .collect();
            return (out, ops, visits, scratch_nnz);
        };
        (out, ops, visits, 0)
    });

    let mut counters = OpCounter {
        macs_dense_equivalent: spec.dense_macs(h, w)?,
        ..Default::default()
    };
    let mut data = Vec::with_capacity(oc_n * ph * pw);
    let mut pixel_visits = 0;
    let mut scratch_nnz = 0;
    for (out, ops, visits, snnz) in per_channel {
        data.extend(out);
        counters += ops;
        pixel_visits += visits;
        scratch_nnz += snnz;
    }
    let out_t = QTensor::new(vec![oc_n, ph, pw], spec.out_fmt, data)?;
    let output = encode_sm(&out_t);

    let mut tr = AccessTrace::new();
    load_weights(spec, addrs, &mut tr);
    tr.dram_read(AccessTag::Activations, addrs.input, input.sm_mem_words() as u64);
    tr.dram_read(
        AccessTag::Activations,
        addrs.input + input.sm_mem_words() as u64,
        input.nnz() as u64,
    );
    // Weights live in SRAM ic-major, so all kernels one input pixel needs form
    // one slab; each pixel reads the taps it actually uses.
    let slab = (oc_n * kh * kw) as u64;
    for px in input.nonzero_iter() {
        let used = spec.taps(px.y, kh, ho).count() * spec.taps(px.x, kw, wo).count() * oc_n;
        tr.sram_read(AccessTag::Weights, px.c as u64 * slab, used as u64);
    }
    if spec.pool != Pool::None && !opts.fuse_pool {
        let full = (oc_n * ho * wo) as u64;
        let words = full.div_ceil(16) + scratch_nnz as u64;
        tr.dram_write(AccessTag::Scratch, addrs.scratch, words);
        tr.dram_read(AccessTag::Scratch, addrs.scratch, words);
    }
    write_output(&output, addrs, &mut tr);

    Ok(LayerRunResult {
        input_sparsity: measure_sparsity_sm(input),
        output_sparsity: measure_sparsity_sm(&output),
        output,
        counters,
        accesses: tr,
        pixel_visits,
    })
}

fn load_weights(spec: &ConvLayerSpec, addrs: &LayerAddrs, tr: &mut AccessTrace) {
    // kernels then 32-bit biases (two words each), one contiguous region
    let words = spec.weight_words() + 2 * spec.out_channels as u64;
    tr.dram_read(AccessTag::Weights, addrs.weights, words);
    tr.sram_write(AccessTag::Weights, 0, words);
}

fn write_output(output: &SparseFeatureMap, addrs: &LayerAddrs, tr: &mut AccessTrace) {
    let sm = output.sm_mem_words() as u64;
    tr.dram_write(AccessTag::Activations, addrs.output, sm);
    tr.dram_write(AccessTag::Activations, addrs.output + sm, output.nnz() as u64);
}

/// Runs the dense reference and records the traffic a dense engine would
/// generate: uncompressed maps, one SRAM weight read per MAC.
pub fn conv_dense_run(
    spec: &ConvLayerSpec,
    input: &QTensor,
    opts: &ConvOptions,
    addrs: &LayerAddrs,
) -> Result<LayerRunResult> {
    let (out_t, counters) = conv_dense_oracle(spec, input)?;
    let (_, h, w) = input.chw();
    let (ho, wo) = spec.conv_out_dims(h, w)?;
    let mut tr = AccessTrace::new();
    load_weights(spec, addrs, &mut tr);
    tr.dram_read(AccessTag::Activations, addrs.input, input.len() as u64);
    tr.sram_read(AccessTag::Weights, 0, counters.macs_executed);
    if spec.pool != Pool::None && !opts.fuse_pool {
        let full = (spec.out_channels * ho * wo) as u64;
        tr.dram_write(AccessTag::Scratch, addrs.scratch, full);
        tr.dram_read(AccessTag::Scratch, addrs.scratch, full);
    }
    tr.dram_write(AccessTag::Activations, addrs.output, out_t.len() as u64);
    Ok(LayerRunResult {
        input_sparsity: measure_sparsity(input),
        output_sparsity: measure_sparsity(&out_t),
        pixel_visits: (input.len() * spec.out_channels) as u64,
        output: encode_sm(&out_t),
        counters,
        accesses: tr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Dense,
    #[default]
    Sparse,
}

/// Result of a layer-by-layer network run.
#[derive(Debug, Clone)]
pub struct CnnRun {
    pub output: QTensor,
    pub layers: Vec<LayerRunResult>,
    /// Largest `input map + output map + layer weights` footprint, in bytes.
    pub peak_live_bytes: u64,
}

/// Base of the weight region; activations ping-pong below it.
pub const WEIGHT_BASE: u64 = 1 << 30;
const ACT_BUF: u64 = 1 << 26;
const SCRATCH_BASE: u64 = 1 << 28;

/// Runs layers in sequence. Only the current input map, output map and layer
/// weights are live at any point.
pub fn run_network(
    layers: &[ConvLayerSpec],
    input: &QTensor,
    mode: ExecMode,
    opts: &ConvOptions,
) -> Result<CnnRun> {
    if layers.is_empty() {
        return Err(Error::config("network has no layers"));
    }
    let mut results = Vec::with_capacity(layers.len());
    let mut weight_addr = WEIGHT_BASE;
    let mut peak = 0u64;
    let mut sparse_cur = encode_sm(input);
    let mut dense_cur = input.clone();
    if dense_cur.rank() != 3 {
        let (c, h, w) = dense_cur.chw();
        dense_cur = QTensor::new(vec![c, h, w], input.fmt(), dense_cur.into_data())?;
    }
    for (i, spec) in layers.iter().enumerate() {
        let addrs = LayerAddrs {
            input: (i as u64 % 2) * ACT_BUF,
            output: ((i as u64 + 1) % 2) * ACT_BUF,
            weights: weight_addr,
            scratch: SCRATCH_BASE,
        };
        weight_addr += spec.weight_words() + 2 * spec.out_channels as u64;
        let r = match mode {
            ExecMode::Sparse => conv_zeroskip_with(spec, &sparse_cur, opts, &addrs),
            ExecMode::Dense => conv_dense_run(spec, &dense_cur, opts, &addrs),
        }
        .map_err(|e| match e {
            Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("layer {i}: {m}")),
            other => other,
        })?;
        let weight_bytes = 2 * spec.weight_words() + 4 * spec.out_channels as u64;
        let live = match mode {
            ExecMode::Sparse => map_bytes(&sparse_cur) + map_bytes(&r.output) + weight_bytes,
            ExecMode::Dense => 2 * (dense_cur.len() + r.output.pixels()) as u64 + weight_bytes,
        };
        peak = peak.max(live);
        match mode {
            ExecMode::Sparse => sparse_cur = r.output.clone(),
            ExecMode::Dense => dense_cur = crate::codec::decode_sm(&r.output)?,
        }
        results.push(r);
    }
    let output = match mode {
        ExecMode::Sparse => crate::codec::decode_sm(&sparse_cur)?,
        ExecMode::Dense => dense_cur,
    };
    Ok(CnnRun {
        output,
        layers: results,
        peak_live_bytes: peak,
    })
}

fn map_bytes(s: &SparseFeatureMap) -> u64 {
    s.payload_bits().div_ceil(8)
}
