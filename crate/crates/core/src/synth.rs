//! Seeded synthetic data: sparse feature maps, random layers, and input
//! sequences (uniform, piecewise-constant, band-limited noise).
//!
//! Every generator takes an explicit RNG so runs are reproducible from a seed.
//! Only IEEE basic arithmetic is used on floats, never libm calls, so values
//! do not depend on the platform math library.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{ConvLayerSpec, Pool};
use crate::error::{Error, Result};
use crate::fxp::{quantize, OpCounter, QFormat, QScalar, QTensor};
use crate::gru::{GruLayerSpec, GruWeights, ACT_FMT};

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Post-ReLU style map: each pixel is zero with probability `sparsity`,
/// otherwise a positive value up to `max_value`.
pub fn sparse_map<R: Rng>(dims: (usize, usize, usize), fmt: QFormat, sparsity: f64, max_value: f64, rng: &mut R) -> QTensor {
    let n = dims.0 * dims.1 * dims.2;
    let max_raw = raw_limit(max_value, fmt);
    let data = (0..n)
        .map(|_| {
            if rng.random::<f64>() < sparsity {
                0
            } else {
                rng.random_range(1..=max_raw)
            }
        })
        .collect();
    QTensor::new(vec![dims.0, dims.1, dims.2], fmt, data).expect("dims match data")
}

/// Like [`sparse_map`] but with exactly `round(sparsity * n)` zeros at
/// uniformly shuffled positions.
pub fn sparse_map_exact<R: Rng>(dims: (usize, usize, usize), fmt: QFormat, sparsity: f64, max_value: f64, rng: &mut R) -> QTensor {
    let n = dims.0 * dims.1 * dims.2;
    let zeros = ((sparsity.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let max_raw = raw_limit(max_value, fmt);
    let mut data: Vec<i16> = (0..n)
        .map(|i| if i < zeros { 0 } else { rng.random_range(1..=max_raw) })
        .collect();
    data.shuffle(rng);
    QTensor::new(vec![dims.0, dims.1, dims.2], fmt, data).expect("dims match data")
}

fn raw_limit(max_value: f64, fmt: QFormat) -> i16 {
    let mut ops = OpCounter::default();
    quantize(max_value, fmt, &mut ops).raw.max(1)
}

/// Values uniform in `[-amp, amp]`, quantized.
pub fn uniform_values<R: Rng>(n: usize, amp: f64, fmt: QFormat, rng: &mut R) -> Vec<i16> {
    let mut ops = OpCounter::default();
    (0..n)
        .map(|_| quantize((2.0 * rng.random::<f64>() - 1.0) * amp, fmt, &mut ops).raw)
        .collect()
}

/// Conv layer with weights uniform in `±w_amp` and biases uniform in `±b_amp`
/// (real units, stored at accumulator scale).
#[allow(clippy::too_many_arguments)]
pub fn random_conv_layer<R: Rng>(
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    relu: bool,
    pool: Pool,
    w_amp: f64,
    b_amp: f64,
    rng: &mut R,
) -> ConvLayerSpec {
    let w_fmt = QFormat::Q2_14;
    let act = QFormat::Q8_8;
    let weights = QTensor::new(vec![out_c, in_c, k, k], w_fmt, uniform_values(out_c * in_c * k * k, w_amp, w_fmt, rng))
        .expect("dims match data");
    let scale = ((act.frac_bits() + w_fmt.frac_bits()) as f64).exp2();
    let bias = (0..out_c)
        .map(|_| ((2.0 * rng.random::<f64>() - 1.0) * b_amp * scale).round_ties_even() as i32)
        .collect();
    ConvLayerSpec {
        in_channels: in_c,
        out_channels: out_c,
        kernel_h: k,
        kernel_w: k,
        stride,
        pad,
        weights,
        bias,
        relu,
        pool,
        in_fmt: act,
        out_fmt: act,
    }
}

/// GRU weights uniform in `±w_amp`, biases uniform in `±b_amp` (real units).
pub fn random_gru_weights<R: Rng>(input: usize, hidden: usize, w_amp: f64, b_amp: f64, rng: &mut R) -> GruWeights {
    let w_fmt = QFormat::Q2_14;
    let mut m = |r: usize, c: usize| {
        QTensor::new(vec![r, c], w_fmt, uniform_values(r * c, w_amp, w_fmt, rng)).expect("dims match data")
    };
    let (w_xr, w_xu, w_xc) = (m(hidden, input), m(hidden, input), m(hidden, input));
    let (w_hr, w_hu, w_hc) = (m(hidden, hidden), m(hidden, hidden), m(hidden, hidden));
    let scale = ((ACT_FMT.frac_bits() + w_fmt.frac_bits()) as f64).exp2();
    let mut b = || -> Vec<i32> {
        (0..hidden)
            .map(|_| ((2.0 * rng.random::<f64>() - 1.0) * b_amp * scale).round_ties_even() as i32)
            .collect()
    };
    let (b_r, b_u, b_c) = (b(), b(), b());
    GruWeights {
        w_xr,
        w_xu,
        w_xc,
        w_hr,
        w_hu,
        w_hc,
        b_r,
        b_u,
        b_c,
    }
}

pub fn random_gru_layer<R: Rng>(input: usize, hidden: usize, w_amp: f64, b_amp: f64, theta: QScalar, rng: &mut R) -> GruLayerSpec {
    GruLayerSpec::new(&random_gru_weights(input, hidden, w_amp, b_amp, rng), theta).expect("consistent dims")
}

/// Input sequence shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SeqKind {
    /// Independent uniform values every step.
    Uniform,
    /// Uniform values held for `hold` steps, then redrawn.
    PiecewiseConstant { hold: usize },
    /// White noise through two cascaded one-pole low-pass filters with
    /// coefficient `alpha` in `(0, 1]`; smaller is slower.
    BandLimited { alpha: f64 },
}

impl std::str::FromStr for SeqKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |d: f64| -> Result<f64> {
            if arg.is_empty() {
                Ok(d)
            } else {
                arg.parse().map_err(|_| Error::config(format!("bad parameter in {s:?}")))
            }
        };
        match name {
            "uniform" => Ok(SeqKind::Uniform),
            "piecewise" | "piecewise-constant" => Ok(SeqKind::PiecewiseConstant {
                hold: num(10.0)? as usize,
            }),
            "bandlimited" | "band-limited" => Ok(SeqKind::BandLimited { alpha: num(0.05)? }),
            _ => Err(Error::config(format!(
                "unknown sequence kind {s:?} (uniform, piecewise[:hold], bandlimited[:alpha])"
            ))),
        }
    }
}

/// `(T, I)` sequence in Q8.8 with values within `±amp`.
pub fn sequence<R: Rng>(kind: SeqKind, steps: usize, width: usize, amp: f64, rng: &mut R) -> Result<QTensor> {
    let mut ops = OpCounter::default();
    let mut vals = vec![0f64; steps * width];
    match kind {
        SeqKind::Uniform => {
            for v in vals.iter_mut() {
                *v = (2.0 * rng.random::<f64>() - 1.0) * amp;
            }
        }
        SeqKind::PiecewiseConstant { hold } => {
            if hold == 0 {
                return Err(Error::config("hold must be >= 1"));
            }
            let mut cur = vec![0f64; width];
            for t in 0..steps {
                if t % hold == 0 {
                    for c in cur.iter_mut() {
                        *c = (2.0 * rng.random::<f64>() - 1.0) * amp;
                    }
                }
                vals[t * width..(t + 1) * width].copy_from_slice(&cur);
            }
        }
        SeqKind::BandLimited { alpha } => {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::config("alpha must be in (0, 1]"));
            }
            let mut s1 = vec![0f64; width];
            let mut s2 = vec![0f64; width];
            // settle the filters so the sequence starts in steady state
            let warmup = (4.0 / alpha) as usize;
            for t in 0..warmup + steps {
                for c in 0..width {
                    let noise = 2.0 * rng.random::<f64>() - 1.0;
                    s1[c] += alpha * (noise - s1[c]);
                    s2[c] += alpha * (s1[c] - s2[c]);
                    if t >= warmup {
                        vals[(t - warmup) * width + c] = s2[c];
                    }
                }
            }
            let peak = vals.iter().fold(0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                for v in vals.iter_mut() {
                    *v *= amp / peak;
                }
            }
        }
    }
    QTensor::from_f64(vec![steps, width], ACT_FMT, &vals, &mut ops)
}
