//! Architecture catalog: declarative layer lists for the seven network
//! families and their variants, closed-form parameter/MAC audits, the
//! executable network and its checkpoint format.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{
    collapse, conv2d, dropout, gated_conv, linear, map_to_sequence, maxpool2d, tiling, CollapseMode, ConvLayer,
    GatedConvLayer, LinearLayer, PoolLayer,
};
use crate::recurrent::{lstm1d, mdlstm2d, Combine, Lstm1dLayer, Mdlstm2dLayer, Schedule};
use crate::tensor::{Real, Tensor};

/// Line height every architecture is built for.
pub const NOMINAL_HEIGHT: usize = 128;

/// Dropout probability on every selected layer output.
pub const DROPOUT_RATE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Cnn,
    Gnn,
    Cnn1dLstm,
    Gnn1dLstm,
    Mdlstm2d,
    Mdlstm2dX2,
    Puigcerver,
}

impl Arch {
    pub const ALL: [Arch; 7] = [
        Arch::Cnn,
        Arch::Gnn,
        Arch::Cnn1dLstm,
        Arch::Gnn1dLstm,
        Arch::Mdlstm2d,
        Arch::Mdlstm2dX2,
        Arch::Puigcerver,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Cnn => "cnn",
            Arch::Gnn => "gnn",
            Arch::Cnn1dLstm => "cnn1dlstm",
            Arch::Gnn1dLstm => "gnn1dlstm",
            Arch::Mdlstm2d => "mdlstm2d",
            Arch::Mdlstm2dX2 => "mdlstm2d_x2",
            Arch::Puigcerver => "puigcerver",
        }
    }

    /// Published `(parameters, MACs at 128×1000)` totals, where available.
    pub fn reference_totals(self) -> Option<(u64, u64)> {
        match self {
            Arch::Puigcerver => Some((9_600_000, 1_609_000_000)),
            Arch::Gnn1dLstm => Some((799_000, 216_000_000)),
            Arch::Mdlstm2d => Some((836_000, 344_000_000)),
            Arch::Mdlstm2dX2 => Some((3_300_000, 1_340_000_000)),
            _ => None,
        }
    }

    fn has_decoder(self) -> bool {
        !matches!(self, Arch::Cnn | Arch::Gnn)
    }

    fn default_decoder_blstms(self) -> usize {
        match self {
            Arch::Puigcerver => 5,
            Arch::Cnn | Arch::Gnn => 0,
            _ => 2,
        }
    }

    fn default_collapse(self) -> CollapseMode {
        match self {
            Arch::Puigcerver => CollapseMode::ConcatHeight,
            _ => CollapseMode::MaxpoolHeight,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        Ok(match key.as_str() {
            "cnn" => Arch::Cnn,
            "gnn" => Arch::Gnn,
            "cnn1dlstm" => Arch::Cnn1dLstm,
            "gnn1dlstm" => Arch::Gnn1dLstm,
            "mdlstm2d" | "2dlstm" => Arch::Mdlstm2d,
            "mdlstm2dx2" | "2dlstmx2" => Arch::Mdlstm2dX2,
            "puigcerver" | "cnn1dlstmpuigcerver" => Arch::Puigcerver,
            _ => {
                return Err(Error::invalid(format!(
                    "unknown architecture '{s}' (expected one of: {})",
                    Arch::ALL.map(Arch::name).join(", ")
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DropoutPreset {
    /// Last two candidate layers.
    Small,
    /// Four candidates, evenly spaced.
    #[default]
    Medium,
    /// Every candidate.
    Large,
    None,
}

impl FromStr for DropoutPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Self::Small),
            "medium" => Ok(Self::Medium),
            "large" => Ok(Self::Large),
            "none" | "off" => Ok(Self::None),
            _ => Err(Error::invalid(format!(
                "unknown dropout preset '{s}' (small, medium, large, none)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantKnobs {
    /// -2, 0 or +4 stride-1 3×3 convolutions relative to the reference encoder.
    pub encoder_extra_convs: i32,
    /// Number of bidirectional LSTMs in the decoder; `None` keeps the
    /// architecture's reference count.
    pub decoder_blstm_count: Option<usize>,
    /// `None` keeps the architecture's reference collapse.
    pub collapse_mode: Option<CollapseMode>,
    pub depth_multiplier: f64,
    pub dropout: DropoutPreset,
    pub class_count: usize,
}

impl Default for VariantKnobs {
    fn default() -> Self {
        Self {
            encoder_extra_convs: 0,
            decoder_blstm_count: None,
            collapse_mode: None,
            depth_multiplier: 1.0,
            dropout: DropoutPreset::Medium,
            class_count: 110,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Tiling {
        block: (usize, usize),
    },
    Conv {
        conv: ConvLayer,
        activation: Option<Activation>,
    },
    GatedConv {
        gated: GatedConvLayer,
    },
    MaxPool {
        pool: PoolLayer,
    },
    Mdlstm {
        cell: Mdlstm2dLayer,
    },
    /// 2D map to a `[W, C]` sequence.
    Collapse {
        mode: CollapseMode,
    },
    Lstm {
        cell: Lstm1dLayer,
    },
    Linear {
        linear: LinearLayer,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Dropout on this layer's output during training.
    #[serde(default)]
    pub dropout: bool,
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamRole {
    Weight { fan_in: usize, fan_out: usize },
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Tiling { .. } => "Tiling",
            LayerKind::Conv { .. } => "Conv",
            LayerKind::GatedConv { .. } => "GatedConv",
            LayerKind::MaxPool { .. } => "MaxPooling",
            LayerKind::Mdlstm { .. } => "2D-LSTM",
            LayerKind::Collapse { .. } => "Collapse",
            LayerKind::Lstm { .. } => "1D-LSTM",
            LayerKind::Linear { .. } => "Linear",
        }
    }

    pub fn is_trainable(&self) -> bool {
        !self.params().is_empty()
    }

    pub fn params(&self) -> Vec<ParamInfo> {
        let p = |suffix: &str, shape: Vec<usize>, role| ParamInfo {
            name: format!("{}.{suffix}", self.name),
            shape,
            role,
        };
        let w = |fan_in, fan_out| ParamRole::Weight { fan_in, fan_out };
        match &self.kind {
            LayerKind::Conv { conv, .. } => {
                let [o, i, kh, kw] = conv.weight_shape();
                let mut v = vec![p("weight", vec![o, i, kh, kw], w(i * kh * kw, o * kh * kw))];
                if conv.bias {
                    v.push(p("bias", vec![o], ParamRole::Bias));
                }
                v
            }
            LayerKind::GatedConv { gated } => {
                let g = gated.gate();
                let [o, i, kh, kw] = g.weight_shape();
                vec![
                    p("weight", vec![o, i, kh, kw], w(i * kh * kw, o * kh * kw)),
                    p("bias", vec![o], ParamRole::Bias),
                ]
            }
            LayerKind::Mdlstm { cell } => {
                let [ws, us, bs] = cell.shapes();
                let rows = 5 * cell.hidden;
                vec![
                    p("w", ws, w(cell.input_dim, rows)),
                    p("u", us, w(2 * cell.hidden, rows)),
                    p("b", bs, ParamRole::Bias),
                ]
            }
            LayerKind::Lstm { cell } => {
                let [ws, us, bs] = cell.shapes();
                let rows = 4 * cell.hidden;
                vec![
                    p("w", ws, w(cell.input_dim, rows)),
                    p("u", us, w(cell.hidden, rows)),
                    p("b", bs, ParamRole::Bias),
                ]
            }
            LayerKind::Linear { linear } => {
                let mut v = vec![p(
                    "weight",
                    linear.weight_shape().to_vec(),
                    w(linear.in_dim, linear.out_dim),
                )];
                if linear.bias {
                    v.push(p("bias", linear.bias_shape().to_vec(), ParamRole::Bias));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

/// Symbolic activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extent {
    Map { c: usize, h: usize, w: usize },
    Seq { t: usize, d: usize },
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extent::Map { c, h, w } => write!(f, "{c}x{h}x{w}"),
            Extent::Seq { t, d } => write!(f, "{t}x{d}"),
        }
    }
}

fn propagate(layer: &LayerSpec, input: Extent) -> Result<(Extent, u64)> {
    let err = |msg: String| Error::Shape(format!("layer {}: {msg}", layer.name));
    match (&layer.kind, input) {
        (LayerKind::Tiling { block }, Extent::Map { c, h, w }) => Ok((
            Extent::Map {
                c: c * block.0 * block.1,
                h: h.div_ceil(block.0),
                w: w.div_ceil(block.1),
            },
            0,
        )),
        (LayerKind::Conv { conv, .. }, Extent::Map { c, h, w }) => {
            conv.validate()?;
            if c != conv.in_channels {
                return Err(err(format!("expects {} channels, gets {c}", conv.in_channels)));
            }
            let (oh, ow) = conv.output_extent(h, w);
            Ok((
                Extent::Map {
                    c: conv.out_channels,
                    h: oh,
                    w: ow,
                },
                conv.macs(h, w),
            ))
        }
        (LayerKind::GatedConv { gated }, Extent::Map { c, h, w }) => {
            if c != gated.channels {
                return Err(err(format!("expects {} channels, gets {c}", gated.channels)));
            }
            Ok((input, gated.gate().macs(h, w)))
        }
        (LayerKind::MaxPool { pool }, Extent::Map { c, h, w }) => {
            let (oh, ow) = pool.output_extent(h, w);
            Ok((Extent::Map { c, h: oh, w: ow }, 0))
        }
        (LayerKind::Mdlstm { cell }, Extent::Map { c, h, w }) => {
            if c != cell.input_channels() {
                return Err(err(format!("expects {} channels, gets {c}", cell.input_channels())));
            }
            Ok((
                Extent::Map {
                    c: cell.output_channels(),
                    h,
                    w,
                },
                cell.macs(h, w),
            ))
        }
        (LayerKind::Collapse { mode }, Extent::Map { c, h, w }) => {
            let d = match mode {
                CollapseMode::MaxpoolHeight => c,
                CollapseMode::ConcatHeight => c * h,
            };
            Ok((Extent::Seq { t: w, d }, 0))
        }
        (LayerKind::Lstm { cell }, Extent::Seq { t, d }) => {
            if d != cell.input_dim {
                return Err(err(format!("expects {} features, gets {d}", cell.input_dim)));
            }
            Ok((
                Extent::Seq {
                    t,
                    d: cell.output_dim(),
                },
                cell.macs(t),
            ))
        }
        (LayerKind::Linear { linear }, Extent::Seq { t, d }) => {
            if d != linear.directions * linear.in_dim {
                return Err(err(format!(
                    "expects {} features, gets {d}",
                    linear.directions * linear.in_dim
                )));
            }
            Ok((Extent::Seq { t, d: linear.out_dim }, linear.macs(t)))
        }
        (_, Extent::Map { .. }) => Err(err("needs a sequence but receives a 2D map".into())),
        (_, Extent::Seq { .. }) => Err(err("needs a 2D map but receives a sequence".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub knobs: VariantKnobs,
    pub input_channels: usize,
    /// Image height the network is built for; concatenating collapses only
    /// accept this height.
    pub input_height: usize,
    pub layers: Vec<LayerSpec>,
}

/// One row of an audit.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub name: String,
    pub kind: &'static str,
    pub output: Extent,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub arch: Arch,
    pub input: (usize, usize),
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// Parameter counts of the trainable rows, in order.
    pub fn trainable_params(&self) -> Vec<u64> {
        self.rows.iter().filter(|r| r.params > 0).map(|r| r.params).collect()
    }

    /// `layer<TAB>params<TAB>macs`, one line per layer.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\n", r.name, r.params, r.macs));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "architecture {} at {}x{} (HxW)\n{:<12} {:<11} {:>14} {:>12} {:>16}\n",
            self.arch, self.input.0, self.input.1, "layer", "kind", "output", "params", "macs"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:<11} {:>14} {:>12} {:>16}\n",
                r.name,
                r.kind,
                r.output.to_string(),
                r.params,
                r.macs
            ));
        }
        let (p, m) = (self.total_params(), self.total_macs());
        out.push_str(&format!("{:<12} {:<11} {:>14} {:>12} {:>16}\n", "total", "", "", p, m));
        if let Some((rp, rm)) = self.arch.reference_totals() {
            let pct = |a: u64, b: u64| 100.0 * (a as f64 - b as f64) / b as f64;
            out.push_str(&format!(
                "reference    params {rp} (delta {:+.1}%)  macs {rm} (delta {:+.1}%)\n",
                pct(p, rp),
                pct(m, rm)
            ));
        }
        out
    }
}

impl NetworkSpec {
    pub fn build(arch: Arch, knobs: VariantKnobs) -> Result<Self> {
        validate_knobs(arch, &knobs)?;
        let mut b = Builder::new(arch, &knobs);
        match arch {
            Arch::Puigcerver => b.puigcerver(),
            Arch::Mdlstm2d | Arch::Mdlstm2dX2 => b.mdlstm2d(),
            Arch::Cnn | Arch::Cnn1dLstm => b.gnn(false),
            Arch::Gnn | Arch::Gnn1dLstm => b.gnn(true),
        }
        let mut layers = b.layers;
        assign_dropout(&mut layers, knobs.dropout, b.encoder_end);
        let spec = Self {
            arch,
            knobs,
            input_channels: 1,
            input_height: NOMINAL_HEIGHT,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn class_count(&self) -> usize {
        self.knobs.class_count
    }

    /// Static channel/extent consistency check on a nominal input.
    pub fn validate(&self) -> Result<()> {
        let collapses = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Collapse { .. }))
            .count();
        if collapses != 1 {
            return Err(Error::invalid(format!(
                "network needs exactly one 2D-to-1D collapse, found {collapses}"
            )));
        }
        let (_, w) = self.min_input();
        let mut ext = Extent::Map {
            c: self.input_channels,
            h: self.input_height,
            w,
        };
        for l in &self.layers {
            ext = propagate(l, ext)?.0;
        }
        match ext {
            Extent::Seq { d, .. } if d == self.class_count() => Ok(()),
            other => Err(Error::Shape(format!(
                "network ends in {other}, expected a sequence of {} classes",
                self.class_count()
            ))),
        }
    }

    /// Total `(height, width)` downsampling before the collapse.
    pub fn downsampling(&self) -> (usize, usize) {
        let mut f = (1, 1);
        for l in &self.layers {
            let s = match &l.kind {
                LayerKind::Tiling { block } => *block,
                LayerKind::Conv { conv, .. } => conv.stride,
                LayerKind::MaxPool { pool } => pool.stride,
                LayerKind::Collapse { .. } => break,
                _ => (1, 1),
            };
            f = (f.0 * s.0, f.1 * s.1);
        }
        f
    }

    pub fn min_input(&self) -> (usize, usize) {
        self.downsampling()
    }

    pub fn output_frames(&self, width: usize) -> usize {
        let mut w = width;
        for l in &self.layers {
            match &l.kind {
                LayerKind::Tiling { block } => w = w.div_ceil(block.1),
                LayerKind::Conv { conv, .. } => w = conv.output_extent(1, w).1,
                LayerKind::MaxPool { pool } => w = pool.output_extent(1, w).1,
                LayerKind::Collapse { .. } => break,
                _ => {}
            }
        }
        w
    }

    pub fn audit(&self, height: usize, width: usize) -> Result<AuditReport> {
        let (mh, mw) = self.min_input();
        if height < mh || width < mw {
            return Err(Error::invalid(format!(
                "input {height}x{width} is smaller than the network's total downsampling {mh}x{mw}"
            )));
        }
        let mut ext = Extent::Map {
            c: self.input_channels,
            h: height,
            w: width,
        };
        let mut rows = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (out, macs) = propagate(l, ext)?;
            rows.push(AuditRow {
                name: l.name.clone(),
                kind: l.kind_name(),
                output: out,
                params: l.param_count() as u64,
                macs,
            });
            ext = out;
        }
        Ok(AuditReport {
            arch: self.arch,
            input: (height, width),
            rows,
        })
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn param_count(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count() as u64).sum()
    }
}

fn validate_knobs(arch: Arch, k: &VariantKnobs) -> Result<()> {
    if ![-2, 0, 4].contains(&k.encoder_extra_convs) {
        return Err(Error::invalid(format!(
            "encoder_extra_convs must be -2, 0 or +4, got {}",
            k.encoder_extra_convs
        )));
    }
    if arch == Arch::Puigcerver && k.encoder_extra_convs != 0 {
        return Err(Error::invalid(
            "encoder_extra_convs applies to the gated/convolutional and 2D-LSTM families, not puigcerver",
        ));
    }
    if let Some(n) = k.decoder_blstm_count {
        if !arch.has_decoder() {
            return Err(Error::invalid(format!(
                "{arch} has no recurrent decoder; decoder_blstm_count does not apply"
            )));
        }
        if n == 0 {
            return Err(Error::invalid("decoder_blstm_count must be at least 1"));
        }
    }
    if !(k.depth_multiplier.is_finite() && k.depth_multiplier > 0.0) {
        return Err(Error::invalid(format!(
            "depth_multiplier must be positive, got {}",
            k.depth_multiplier
        )));
    }
    if k.class_count < 2 {
        return Err(Error::invalid("class_count must be at least 2 (blank + one symbol)"));
    }
    Ok(())
}

/// Dropout candidates are the trainable encoder layers after the first.
fn assign_dropout(layers: &mut [LayerSpec], preset: DropoutPreset, encoder_end: usize) {
    let candidates: Vec<usize> = (0..encoder_end).filter(|&i| layers[i].is_trainable()).skip(1).collect();
    let n = candidates.len();
    let chosen: Vec<usize> = match preset {
        DropoutPreset::None => Vec::new(),
        DropoutPreset::Large => candidates.clone(),
        DropoutPreset::Small => candidates[n.saturating_sub(2)..].to_vec(),
        DropoutPreset::Medium if n <= 4 => candidates.clone(),
        DropoutPreset::Medium => (0..4).map(|i| candidates[(i * (n - 1) + 1) / 3]).collect(),
    };
    for i in chosen {
        layers[i].dropout = true;
    }
}

struct Builder<'k> {
    arch: Arch,
    knobs: &'k VariantKnobs,
    layers: Vec<LayerSpec>,
    counters: HashMap<&'static str, usize>,
    /// Channels of the current map.
    channels: usize,
    encoder_end: usize,
}

impl<'k> Builder<'k> {
    fn new(arch: Arch, knobs: &'k VariantKnobs) -> Self {
        Self {
            arch,
            knobs,
            layers: Vec::new(),
            counters: HashMap::new(),
            channels: 1,
            encoder_end: 0,
        }
    }

    fn depth(&self, base: usize) -> usize {
        let m = if self.arch == Arch::Mdlstm2dX2 {
            2.0 * self.knobs.depth_multiplier
        } else {
            self.knobs.depth_multiplier
        };
        ((base as f64 * m).round() as usize).max(1)
    }

    fn push(&mut self, prefix: &'static str, kind: LayerKind) {
        let n = self.counters.entry(prefix).or_insert(0);
        *n += 1;
        let name = format!("{prefix}{n}");
        self.layers.push(LayerSpec {
            name,
            kind,
            dropout: false,
        });
    }

    fn tiling(&mut self, block: (usize, usize)) {
        self.channels *= block.0 * block.1;
        self.push("tiling", LayerKind::Tiling { block });
    }

    fn conv(&mut self, conv: ConvLayer) {
        self.channels = conv.out_channels;
        self.push(
            "conv",
            LayerKind::Conv {
                conv,
                activation: Some(Activation::Tanh),
            },
        );
    }

    fn gate(&mut self, kernel: (usize, usize)) {
        let channels = self.channels;
        self.push(
            "gate",
            LayerKind::GatedConv {
                gated: GatedConvLayer { channels, kernel },
            },
        );
    }

    fn mdlstm(&mut self, hidden: usize, grouped: bool) {
        let input_dim = if grouped { self.channels / 4 } else { self.channels };
        let cell = Mdlstm2dLayer {
            input_dim,
            hidden,
            grouped_input: grouped,
            half_forget: false,
        };
        self.channels = cell.output_channels();
        self.push("mdlstm", LayerKind::Mdlstm { cell });
    }

    fn collapse(&mut self, mode: CollapseMode) {
        self.encoder_end = self.layers.len();
        self.push("collapse", LayerKind::Collapse { mode });
    }

    fn extra_conv(&mut self, groups: usize) {
        let c = self.channels;
        self.conv(ConvLayer::new(c, c, (3, 3)).grouped(groups));
    }

    fn collapse_mode(&self) -> CollapseMode {
        self.knobs.collapse_mode.unwrap_or(self.arch.default_collapse())
    }

    fn decoder_blstms(&self) -> usize {
        self.knobs
            .decoder_blstm_count
            .unwrap_or(self.arch.default_decoder_blstms())
    }

    /// BLSTM + per-direction linear pairs, as in the gated reference decoder.
    fn paired_decoder(&mut self, mut dim: usize) {
        let hidden = self.depth(128);
        let n = self.decoder_blstms();
        for i in 0..n {
            self.push(
                "lstm",
                LayerKind::Lstm {
                    cell: Lstm1dLayer {
                        input_dim: dim,
                        hidden,
                        combine: Combine::Concat,
                    },
                },
            );
            let last = i + 1 == n;
            let out_dim = if last { self.knobs.class_count } else { hidden };
            self.push(
                "linear",
                LayerKind::Linear {
                    linear: LinearLayer {
                        in_dim: hidden,
                        out_dim,
                        bias: last,
                        directions: 2,
                    },
                },
            );
            dim = out_dim;
        }
    }

    fn sequence_dim(&self, mode: CollapseMode) -> usize {
        let mut ext = Extent::Map {
            c: 1,
            h: NOMINAL_HEIGHT,
            w: NOMINAL_HEIGHT,
        };
        for l in &self.layers {
            ext = propagate(l, ext).expect("builder emits consistent layers").0;
        }
        match (mode, ext) {
            (CollapseMode::MaxpoolHeight, Extent::Map { c, .. }) => c,
            (CollapseMode::ConcatHeight, Extent::Map { c, h, .. }) => c * h,
            (_, Extent::Seq { .. }) => unreachable!("collapse follows the 2D encoder"),
        }
    }

    fn gnn(&mut self, gated: bool) {
        let extra = self.knobs.encoder_extra_convs;
        let plus = if extra > 0 { 1 } else { 0 };
        let (c8, c16, c32, c64, c128) = (
            self.depth(8),
            self.depth(16),
            self.depth(32),
            self.depth(64),
            self.depth(128),
        );
        self.tiling((2, 2));
        self.conv(ConvLayer::new(self.channels, c8, (3, 3)));
        self.conv(ConvLayer::new(self.channels, c16, (4, 2)).strided((4, 2)));
        if gated {
            self.gate((3, 3));
        }
        for _ in 0..plus {
            self.extra_conv(1);
        }
        if extra >= 0 {
            self.conv(ConvLayer::new(self.channels, c32, (3, 3)));
        }
        if gated {
            self.gate((3, 3));
        }
        for _ in 0..plus {
            self.extra_conv(1);
        }
        self.conv(ConvLayer::new(self.channels, c64, (4, 2)).strided((4, 2)));
        if gated {
            self.gate((3, 3));
        }
        for _ in 0..plus {
            self.extra_conv(1);
        }
        if extra >= 0 {
            self.conv(ConvLayer::new(self.channels, c128, (3, 3)));
        }
        for _ in 0..plus {
            self.extra_conv(1);
        }
        let mode = self.collapse_mode();
        let dim = self.sequence_dim(mode);
        self.collapse(mode);
        if self.arch.has_decoder() {
            self.paired_decoder(dim);
        } else {
            self.push(
                "linear",
                LayerKind::Linear {
                    linear: LinearLayer {
                        in_dim: dim,
                        out_dim: self.knobs.class_count,
                        bias: true,
                        directions: 1,
                    },
                },
            );
        }
    }

    fn mdlstm2d(&mut self) {
        let extra = self.knobs.encoder_extra_convs;
        let plus = extra > 0;
        let mode = self.collapse_mode();
        let (c8, c16, c32, c64, c128) = (
            self.depth(8),
            self.depth(16),
            self.depth(32),
            self.depth(64),
            self.depth(128),
        );
        let (h1, h2, h3) = (self.depth(8), self.depth(20), self.depth(40));
        self.tiling((2, 2));
        if extra >= 0 {
            self.conv(ConvLayer::new(self.channels, c8, (3, 3)));
        }
        self.mdlstm(h1, false);
        if plus {
            self.extra_conv(4);
        }
        self.conv(
            ConvLayer::new(self.channels, 4 * c16, (4, 2))
                .strided((4, 2))
                .grouped(4),
        );
        self.mdlstm(h2, true);
        if plus {
            self.extra_conv(4);
        }
        self.conv(
            ConvLayer::new(self.channels, 4 * c32, (4, 2))
                .strided((4, 2))
                .grouped(4)
                .without_bias(),
        );
        self.mdlstm(h3, true);
        if plus {
            self.extra_conv(4);
        }
        // concatenation keeps the last four rows instead of folding them
        let last_stride = match mode {
            CollapseMode::MaxpoolHeight => (4, 2),
            CollapseMode::ConcatHeight => (1, 2),
        };
        self.conv(
            ConvLayer::new(self.channels, c64, (4, 2))
                .strided(last_stride)
                .without_bias(),
        );
        if extra >= 0 {
            self.conv(ConvLayer::new(self.channels, c128, (1, 3)));
        }
        if plus {
            self.extra_conv(1);
        }
        let dim = self.sequence_dim(mode);
        self.collapse(mode);
        self.paired_decoder(dim);
    }

    fn puigcerver(&mut self) {
        let depths = [16, 32, 48, 64, 80].map(|d| self.depth(d));
        for (i, &d) in depths.iter().enumerate() {
            self.conv(ConvLayer::new(self.channels, d, (3, 3)));
            if i < 3 {
                self.push(
                    "pool",
                    LayerKind::MaxPool {
                        pool: PoolLayer {
                            window: (2, 2),
                            stride: (2, 2),
                        },
                    },
                );
            }
        }
        let mode = self.collapse_mode();
        let dim = self.sequence_dim(mode);
        self.collapse(mode);
        let hidden = self.depth(256);
        let n = self.decoder_blstms();
        let mut input = dim;
        for i in 0..n {
            let last = i + 1 == n;
            self.push(
                "lstm",
                LayerKind::Lstm {
                    cell: Lstm1dLayer {
                        input_dim: input,
                        hidden,
                        combine: if last { Combine::Sum } else { Combine::Concat },
                    },
                },
            );
            input = 2 * hidden;
        }
        self.push(
            "linear",
            LayerKind::Linear {
                linear: LinearLayer {
                    in_dim: hidden,
                    out_dim: self.knobs.class_count,
                    bias: true,
                    directions: 1,
                },
            },
        );
    }
}

// ---------------------------------------------------------------------------
// executable network

/// Runtime switches for one forward pass.
pub struct ForwardMode<'r> {
    /// Dropout RNG; `None` runs in inference mode.
    pub dropout_rng: Option<&'r mut dyn RngCore>,
    pub schedule: Schedule,
}

impl ForwardMode<'_> {
    pub fn inference() -> Self {
        Self {
            dropout_rng: None,
            schedule: Schedule::Wavefront { workers: 1 },
        }
    }
}

/// A `NetworkSpec` with concrete parameter tensors.
#[derive(Clone, Debug)]
pub struct Network<T: Real> {
    spec: NetworkSpec,
    infos: Vec<ParamInfo>,
    params: Vec<Tensor<T>>,
}

/// Parameters bound as tape leaves, aligned with [`Network::params`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> Network<T> {
    /// All parameters zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let infos = spec.param_infos();
        let params = infos.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        Ok(Self { spec, infos, params })
    }

    pub fn from_parts(spec: NetworkSpec, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        spec.validate()?;
        let infos = spec.param_infos();
        let mut by_name: HashMap<String, Tensor<T>> = params.into_iter().collect();
        let mut problems = Vec::new();
        let mut out = Vec::with_capacity(infos.len());
        for info in &infos {
            match by_name.remove(&info.name) {
                Some(t) if t.shape() == info.shape.as_slice() => out.push(t),
                Some(t) => problems.push(format!(
                    "{} has shape {:?}, expected {:?}",
                    info.name,
                    t.shape(),
                    info.shape
                )),
                None => problems.push(format!("{} is missing", info.name)),
            }
        }
        let mut extra: Vec<String> = by_name.into_keys().collect();
        extra.sort();
        problems.extend(extra.into_iter().map(|n| format!("{n} is not part of the network")));
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "tensors do not match the network: {}",
                problems.join("; ")
            )));
        }
        Ok(Self {
            spec,
            infos,
            params: out,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.infos.iter().map(|i| i.name.as_str()).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.infos.iter().position(|i| i.name == name).map(|k| &self.params[k])
    }

    /// Number of scalar parameters actually allocated.
    pub fn allocated_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            infos: self.infos.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    /// Forward from a `[1, H, W]` image to `[T, classes]` logits.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, image: Var, mode: &mut ForwardMode<'_>) -> Result<Var> {
        self.forward_until(tape, bound, image, mode, self.spec.layers.len())
    }

    /// Forward through the first `count` layers.
    pub fn forward_until(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: Var,
        mode: &mut ForwardMode<'_>,
        count: usize,
    ) -> Result<Var> {
        let shape = tape.try_value(image)?.shape().to_vec();
        if shape.len() != 3 || shape[0] != self.spec.input_channels {
            return Err(Error::Shape(format!(
                "network input must be [{}, H, W], got {shape:?}",
                self.spec.input_channels
            )));
        }
        let (mh, mw) = self.spec.min_input();
        if shape[1] < mh || shape[2] < mw {
            return Err(Error::invalid(format!(
                "input {}x{} is smaller than the network's total downsampling {mh}x{mw}",
                shape[1], shape[2]
            )));
        }
        let mut x = image;
        let mut k = 0;
        for layer in self.spec.layers.iter().take(count) {
            let n = layer.params().len();
            let p = &bound.vars[k..k + n];
            k += n;
            x = match &layer.kind {
                LayerKind::Tiling { block } => tiling(tape, x, *block)?,
                LayerKind::Conv { conv, activation } => {
                    let y = conv2d(tape, x, conv, p[0], p.get(1).copied())?;
                    match activation {
                        Some(a) => tape.activation(y, *a)?,
                        None => y,
                    }
                }
                LayerKind::GatedConv { gated } => gated_conv(tape, x, gated, p[0], p[1])?,
                LayerKind::MaxPool { pool } => maxpool2d(tape, x, pool)?,
                LayerKind::Mdlstm { cell } => mdlstm2d(tape, x, cell, p[0], p[1], p[2], mode.schedule)?,
                LayerKind::Collapse { mode: m } => {
                    let c = collapse(tape, x, *m)?;
                    map_to_sequence(tape, c)?
                }
                LayerKind::Lstm { cell } => lstm1d(tape, x, cell, p[0], p[1], p[2])?,
                LayerKind::Linear { linear: l } => linear(tape, x, l, p[0], p.get(1).copied())?,
            };
            if layer.dropout {
                if let Some(rng) = mode.dropout_rng.as_deref_mut() {
                    x = dropout(tape, x, DROPOUT_RATE, true, rng)?;
                }
            }
        }
        Ok(x)
    }

    /// Inference logits for one preprocessed `[1, H, W]` image.
    pub fn infer(&self, image: &Tensor<T>, schedule: Schedule) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let mut mode = ForwardMode {
            dropout_rng: None,
            schedule,
        };
        let y = self.forward(&mut tape, &bound, x, &mut mode)?;
        Ok(tape.value(y).clone())
    }
}

// ---------------------------------------------------------------------------
// checkpoints

const MAGIC: &[u8; 8] = b"MDLZOO01";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    charset: Option<String>,
    #[serde(default)]
    priors: Option<Vec<f64>>,
}

/// Side data stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    /// Class symbols after the blank, in class order.
    pub charset: Option<String>,
    pub priors: Option<Vec<f64>>,
}

pub fn save_checkpoint(net: &Network<f32>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut offset = 0u64;
    let tensors = net
        .named_params()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = Header {
        spec: net.spec().clone(),
        tensors,
        charset: meta.charset.clone(),
        priors: meta.priors.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in net.named_params() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expect: Option<&NetworkSpec>) -> Result<(Network<f32>, CheckpointMeta)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expect)
}

pub fn decode_checkpoint(bytes: &[u8], expect: Option<&NetworkSpec>) -> Result<(Network<f32>, CheckpointMeta)> {
    let truncated = |at: usize, need: usize| {
        Error::Checkpoint(format!(
            "truncated file: need {need} bytes at offset {at}, file has {}",
            bytes.len()
        ))
    };
    if bytes.len() < 16 {
        return Err(truncated(0, 16));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a network checkpoint".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| truncated(16, hlen))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if let Some(spec) = expect {
        if spec != &header.spec {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} network, expected {}",
                header.spec.arch, spec.arch
            )));
        }
    }
    let mut params = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = body + e.offset as usize;
        let end = start + 4 * n;
        if end > bytes.len() {
            return Err(truncated(start, 4 * n));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    let net = Network::from_parts(header.spec, params)?;
    Ok((
        net,
        CheckpointMeta {
            charset: header.charset,
            priors: header.priors,
        },
    ))
}

/// Per-layer parameter counts keyed by layer name.
pub fn param_table(spec: &NetworkSpec) -> BTreeMap<String, usize> {
    spec.layers.iter().map(|l| (l.name.clone(), l.param_count())).collect()
}
