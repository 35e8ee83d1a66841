//! Network description files (TOML).
//!
//! ```toml
//! name = "tiny"
//! mem_config = "mem.toml"   # optional; or an inline [mem] table
//!
//! [[layer]]
//! type = "conv"
//! in_c = 1
//! out_c = 8
//! k = 3
//! stride = 1
//! pad = 1
//! relu = true
//! pool = "max2x2"           # or "none"
//! act_fmt = "Q8.8"
//! w_fmt = "Q2.14"
//! weights_file = "c1_w.qt"  # (out_c, in_c, k, k)
//! bias_file = "c1_b.qt"     # optional, (out_c)
//!
//! [[layer]]
//! type = "gru"
//! input = 16
//! hidden = 32
//! theta = 0.05              # real units, Q8.8
//! files = { w_xr = "xr.qt", w_xu = "xu.qt", w_xc = "xc.qt",
//!           w_hr = "hr.qt", w_hu = "hu.qt", w_hc = "hc.qt",
//!           b_r = "br.qt", b_u = "bu.qt", b_c = "bc.qt" }
//! ```
//!
//! Instead of files a layer may say `init = "random"` (with optional `w_amp`,
//! `b_amp`) to draw seeded synthetic weights. Paths are relative to the
//! description file. A network is either all conv or all GRU layers.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::conv::{ConvLayerSpec, Pool};
use crate::error::{Error, Result};
use crate::fxp::{quantize, shift_round_even, OpCounter, QFormat, QTensor};
use crate::gru::{GruLayerSpec, GruWeights, ACT_FMT};
use crate::io::read_qt;
use crate::mem::MemConfig;
use crate::synth;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDesc {
    pub name: String,
    #[serde(default)]
    pub mem_config: Option<PathBuf>,
    #[serde(default)]
    pub mem: Option<MemConfig>,
    #[serde(rename = "layer", default)]
    pub layers: Vec<LayerDesc>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerDesc {
    Conv(ConvDesc),
    Gru(GruDesc),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Random,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvDesc {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    #[serde(default)]
    pub relu: bool,
    #[serde(default = "no_pool")]
    pub pool: String,
    #[serde(default = "act_fmt")]
    pub act_fmt: String,
    #[serde(default = "w_fmt")]
    pub w_fmt: String,
    pub weights_file: Option<PathBuf>,
    pub bias_file: Option<PathBuf>,
    pub init: Option<Init>,
    #[serde(default = "default_w_amp")]
    pub w_amp: f64,
    #[serde(default)]
    pub b_amp: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GruFiles {
    pub w_xr: PathBuf,
    pub w_xu: PathBuf,
    pub w_xc: PathBuf,
    pub w_hr: PathBuf,
    pub w_hu: PathBuf,
    pub w_hc: PathBuf,
    pub b_r: Option<PathBuf>,
    pub b_u: Option<PathBuf>,
    pub b_c: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GruDesc {
    pub input: usize,
    pub hidden: usize,
    #[serde(default)]
    pub theta: f64,
    #[serde(default = "w_fmt")]
    pub w_fmt: String,
    pub files: Option<GruFiles>,
    pub init: Option<Init>,
    #[serde(default = "default_w_amp")]
    pub w_amp: f64,
    #[serde(default)]
    pub b_amp: f64,
}

fn one() -> usize {
    1
}
fn no_pool() -> String {
    "none".into()
}
fn act_fmt() -> String {
    "Q8.8".into()
}
fn w_fmt() -> String {
    "Q2.14".into()
}
fn default_w_amp() -> f64 {
    0.25
}

/// A loaded, validated network.
#[derive(Debug, Clone)]
pub enum Network {
    Cnn(Vec<ConvLayerSpec>),
    Gru(Vec<GruLayerSpec>),
}

#[derive(Debug, Clone)]
pub struct LoadedNetwork {
    pub name: String,
    pub net: Network,
    pub mem: MemConfig,
}

impl NetworkDesc {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| {
            let offset = e.span().map(|r| r.start).unwrap_or(0);
            Error::malformed(offset, format!("network description: {}", e.message()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_toml_str(&text)
    }

    /// Reads weight files relative to `base_dir` (random layers draw from
    /// `seed`) and checks the layer chain.
    pub fn build(&self, base_dir: &Path, seed: u64) -> Result<LoadedNetwork> {
        let mem = match (&self.mem, &self.mem_config) {
            (Some(_), Some(_)) => return Err(Error::config("give either [mem] or mem_config, not both")),
            (Some(m), None) => m.clone(),
            (None, Some(p)) => load_mem_config(&base_dir.join(p))?,
            (None, None) => MemConfig::default(),
        };
        mem.validate()?;
        if self.layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        let net = match &self.layers[0] {
            LayerDesc::Conv(_) => {
                let mut out = Vec::new();
                for (i, l) in self.layers.iter().enumerate() {
                    let LayerDesc::Conv(c) = l else {
                        return Err(Error::config("cannot mix conv and gru layers"));
                    };
                    let spec = build_conv(c, base_dir, seed, i as u64).map_err(|e| layer_ctx(i, e))?;
                    if let Some(prev) = out.last() {
                        let prev: &ConvLayerSpec = prev;
                        if prev.out_channels != spec.in_channels || prev.out_fmt != spec.in_fmt {
                            return Err(Error::shape(format!(
                                "layer {i} takes {} channels ({}), previous layer gives {} ({})",
                                spec.in_channels, spec.in_fmt, prev.out_channels, prev.out_fmt
                            )));
                        }
                    }
                    out.push(spec);
                }
                Network::Cnn(out)
            }
            LayerDesc::Gru(_) => {
                let mut out: Vec<GruLayerSpec> = Vec::new();
                for (i, l) in self.layers.iter().enumerate() {
                    let LayerDesc::Gru(g) = l else {
                        return Err(Error::config("cannot mix conv and gru layers"));
                    };
                    let spec = build_gru(g, base_dir, seed, i as u64).map_err(|e| layer_ctx(i, e))?;
                    if let Some(prev) = out.last() {
                        if prev.hidden_size() != spec.input_size() {
                            return Err(Error::shape(format!(
                                "layer {i} input {} != previous hidden {}",
                                spec.input_size(),
                                prev.hidden_size()
                            )));
                        }
                    }
                    out.push(spec);
                }
                Network::Gru(out)
            }
        };
        Ok(LoadedNetwork {
            name: self.name.clone(),
            net,
            mem,
        })
    }
}

pub fn load_mem_config(path: &Path) -> Result<MemConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    let cfg: MemConfig = toml::from_str(&text).map_err(|e| {
        Error::malformed(e.span().map(|r| r.start).unwrap_or(0), format!("memory config: {}", e.message()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn layer_ctx(i: usize, e: Error) -> Error {
    match e {
        Error::ShapeMismatch(m) => Error::ShapeMismatch(format!("layer {i}: {m}")),
        Error::InvalidConfig(m) => Error::InvalidConfig(format!("layer {i}: {m}")),
        Error::MissingArtifact(m) => Error::MissingArtifact(format!("layer {i}: {m}")),
        other => other,
    }
}

fn load_matrix(base: &Path, p: &Path, dims: &[usize], fmt: QFormat) -> Result<QTensor> {
    let t = read_qt(&base.join(p))?;
    if t.dims() != dims {
        return Err(Error::shape(format!("{} has dims {:?}, expected {dims:?}", p.display(), t.dims())));
    }
    if t.fmt() != fmt {
        return Err(Error::shape(format!("{} is {}, expected {fmt}", p.display(), t.fmt())));
    }
    Ok(t)
}

/// Reads a bias vector and rescales it to accumulator scale `2^acc_frac`.
fn load_bias(base: &Path, p: Option<&PathBuf>, n: usize, acc_frac: u32) -> Result<Vec<i32>> {
    let Some(p) = p else {
        return Ok(vec![0; n]);
    };
    let t = read_qt(&base.join(p))?;
    if t.dims() != [n] {
        return Err(Error::shape(format!("{} has dims {:?}, expected [{n}]", p.display(), t.dims())));
    }
    let f = t.fmt().frac_bits() as u32;
    Ok(t.data()
        .iter()
        .map(|&v| {
            if acc_frac >= f {
                (v as i32) << (acc_frac - f)
            } else {
                shift_round_even(v as i64, f - acc_frac) as i32
            }
        })
        .collect())
}

fn build_conv(c: &ConvDesc, base: &Path, seed: u64, stream: u64) -> Result<ConvLayerSpec> {
    let act: QFormat = c.act_fmt.parse()?;
    let wf: QFormat = c.w_fmt.parse()?;
    let pool: Pool = c.pool.parse()?;
    let spec = match (&c.weights_file, c.init) {
        (Some(_), Some(_)) => return Err(Error::config("give weights_file or init, not both")),
        (Some(wp), None) => {
            let weights = load_matrix(base, wp, &[c.out_c, c.in_c, c.k, c.k], wf)?;
            let acc_frac = (act.frac_bits() + wf.frac_bits()) as u32;
            ConvLayerSpec {
                in_channels: c.in_c,
                out_channels: c.out_c,
                kernel_h: c.k,
                kernel_w: c.k,
                stride: c.stride,
                pad: c.pad,
                weights,
                bias: load_bias(base, c.bias_file.as_ref(), c.out_c, acc_frac)?,
                relu: c.relu,
                pool,
                in_fmt: act,
                out_fmt: act,
            }
        }
        (None, Some(Init::Random)) => {
            if wf != QFormat::Q2_14 || act != QFormat::Q8_8 {
                return Err(Error::config("random init supports Q8.8 activations with Q2.14 weights"));
            }
            let mut r = synth::rng(seed, stream);
            synth::random_conv_layer(c.in_c, c.out_c, c.k, c.stride, c.pad, c.relu, pool, c.w_amp, c.b_amp, &mut r)
        }
        (None, None) => return Err(Error::MissingArtifact("conv layer has neither weights_file nor init".into())),
    };
    spec.validate()?;
    Ok(spec)
}

fn build_gru(g: &GruDesc, base: &Path, seed: u64, stream: u64) -> Result<GruLayerSpec> {
    let wf: QFormat = g.w_fmt.parse()?;
    if g.theta.is_nan() || g.theta < 0.0 {
        return Err(Error::config(format!("theta must be >= 0, got {}", g.theta)));
    }
    let theta = quantize(g.theta, ACT_FMT, &mut OpCounter::default());
    match (&g.files, g.init) {
        (Some(_), Some(_)) => Err(Error::config("give files or init, not both")),
        (Some(f), None) => {
            let (h, i) = (g.hidden, g.input);
            let acc_frac = (ACT_FMT.frac_bits() + wf.frac_bits()) as u32;
            let w = GruWeights {
                w_xr: load_matrix(base, &f.w_xr, &[h, i], wf)?,
                w_xu: load_matrix(base, &f.w_xu, &[h, i], wf)?,
                w_xc: load_matrix(base, &f.w_xc, &[h, i], wf)?,
                w_hr: load_matrix(base, &f.w_hr, &[h, h], wf)?,
                w_hu: load_matrix(base, &f.w_hu, &[h, h], wf)?,
                w_hc: load_matrix(base, &f.w_hc, &[h, h], wf)?,
                b_r: load_bias(base, f.b_r.as_ref(), h, acc_frac)?,
                b_u: load_bias(base, f.b_u.as_ref(), h, acc_frac)?,
                b_c: load_bias(base, f.b_c.as_ref(), h, acc_frac)?,
            };
            GruLayerSpec::new(&w, theta)
        }
        (None, Some(Init::Random)) => {
            if wf != QFormat::Q2_14 {
                return Err(Error::config("random init supports Q2.14 weights"));
            }
            let mut r = synth::rng(seed, stream);
            Ok(synth::random_gru_layer(g.input, g.hidden, g.w_amp, g.b_amp, theta, &mut r))
        }
        (None, None) => Err(Error::MissingArtifact("gru layer has neither files nor init".into())),
    }
}
