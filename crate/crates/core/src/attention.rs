//! Input-gradient attention maps and analytic receptive fields.

use std::path::Path;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::layers::axis_geometry;
use crate::netzoo::{Extent, ForwardMode, LayerKind, Network, NetworkSpec};
use crate::recurrent::Schedule;
use crate::synthline::GrayImage;
use crate::tensor::{Real, Tensor};

/// Which activations receive the unit seed.
pub const SEED_POINT: &str = "pre_softmax";

/// `|∂out_class / ∂input|` per input pixel.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub class: usize,
    /// Output columns that were seeded.
    pub columns: Vec<usize>,
    /// `[H, W]`, all values non-negative.
    pub values: Tensor<f64>,
}

impl AttentionMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.data().iter().fold(0.0, |m, &v| m.max(v))
    }

    /// Pixels whose value exceeds `threshold`.
    pub fn support(&self, threshold: f64) -> Vec<(usize, usize)> {
        let w = self.width();
        self.values
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > threshold)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }

    /// Number of input columns holding a value ≥ `fraction` of the maximum.
    pub fn support_width(&self, fraction: f64) -> usize {
        let max = self.max_abs();
        if max == 0.0 {
            return 0;
        }
        let (h, w) = (self.height(), self.width());
        let d = self.values.data();
        (0..w)
            .filter(|&x| (0..h).any(|y| d[y * w + x] >= fraction * max))
            .count()
    }

    /// `class<TAB>max_abs_grad<TAB>support_width@1%`.
    pub fn sidecar(&self) -> String {
        format!(
            "{}\t{:e}\t{}\n# seed={} columns={}\n",
            self.class,
            self.max_abs(),
            self.support_width(0.01),
            SEED_POINT,
            if self.columns.is_empty() {
                "none".to_string()
            } else {
                self.columns
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            }
        )
    }
}

/// Seed `seed_value` on logit `class` at every output column.
pub fn attention_map<T: Real>(net: &Network<T>, image: &Tensor<T>, class: usize) -> Result<AttentionMap> {
    attention_map_columns(net, image, class, None, 1.0)
}

/// Seed only `columns` (all when `None`) with `seed_value`.
pub fn attention_map_columns<T: Real>(
    net: &Network<T>,
    image: &Tensor<T>,
    class: usize,
    columns: Option<&[usize]>,
    seed_value: f64,
) -> Result<AttentionMap> {
    let classes = net.spec().class_count();
    if class >= classes {
        return Err(Error::invalid(format!(
            "class {class} is outside the network's {classes} outputs"
        )));
    }
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let x = tape.leaf(image.clone(), true);
    let mut mode = ForwardMode {
        dropout_rng: None,
        schedule: Schedule::Wavefront { workers: 1 },
    };
    let logits = net.forward(&mut tape, &bound, x, &mut mode)?;
    let frames = tape.value(logits).shape()[0];
    let columns: Vec<usize> = match columns {
        Some(c) => {
            if let Some(&bad) = c.iter().find(|&&t| t >= frames) {
                return Err(Error::invalid(format!(
                    "output column {bad} is outside the {frames} output columns"
                )));
            }
            c.to_vec()
        }
        None => (0..frames).collect(),
    };
    let mut seed = Tensor::<T>::zeros(&[frames, classes]);
    for &t in &columns {
        seed.data_mut()[t * classes + class] = T::from_f64(seed_value);
    }
    let grads = tape.backward(&[(logits, seed)])?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let data = match grads.get(x) {
        Some(g) => g.data().iter().map(|v| v.as_f64().abs()).collect(),
        None => vec![0.0; h * w],
    };
    Ok(AttentionMap {
        class,
        columns,
        values: Tensor::new(&[h, w], data)?,
    })
}

/// Inclusive input rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.rows.0..=self.rows.1).contains(&y) && (self.cols.0..=self.cols.1).contains(&x)
    }
}

/// Number of leading layers without recurrence.
pub fn feedforward_prefix(spec: &NetworkSpec) -> usize {
    spec.layers
        .iter()
        .position(|l| matches!(l.kind, LayerKind::Mdlstm { .. } | LayerKind::Lstm { .. }))
        .unwrap_or(spec.layers.len())
}

/// Output column count of the feed-forward prefix at `height × width`.
pub fn prefix_columns(spec: &NetworkSpec, height: usize, width: usize) -> Result<usize> {
    let shapes = prefix_extents(spec, height, width)?;
    Ok(match shapes.last().copied() {
        Some(Extent::Map { w, .. }) => w,
        Some(Extent::Seq { t, .. }) => t,
        None => width,
    })
}

/// Input extent of every prefix layer.
fn prefix_extents(spec: &NetworkSpec, height: usize, width: usize) -> Result<Vec<Extent>> {
    let audit = spec.audit(height, width)?;
    let n = feedforward_prefix(spec);
    let mut ins = vec![Extent::Map {
        c: spec.input_channels,
        h: height,
        w: width,
    }];
    ins.extend(audit.rows.iter().take(n).map(|r| r.output));
    Ok(ins)
}

/// Map an output index interval to the input interval of one axis.
fn back_axis(range: (usize, usize), n_in: usize, k: usize, s: usize, before: usize) -> (usize, usize) {
    let lo = (range.0 * s).saturating_sub(before);
    let hi = (range.1 * s + k - 1).saturating_sub(before).min(n_in - 1);
    (lo.min(n_in - 1), hi)
}

/// Input rectangle that can influence output column `t` of the
/// feed-forward prefix.
pub fn receptive_field(spec: &NetworkSpec, height: usize, width: usize, t: usize) -> Result<Rect> {
    let ins = prefix_extents(spec, height, width)?;
    let n = ins.len() - 1;
    let columns = prefix_columns(spec, height, width)?;
    if t >= columns {
        return Err(Error::invalid(format!(
            "output column {t} is outside the {columns} columns of the feed-forward stack"
        )));
    }
    let last_rows = match ins[n] {
        Extent::Map { h, .. } => (0, h - 1),
        Extent::Seq { .. } => (0, 0),
    };
    let mut rect = Rect {
        rows: last_rows,
        cols: (t, t),
    };
    for (layer, input) in spec.layers[..n].iter().zip(&ins[..n]).rev() {
        let (ih, iw) = match *input {
            Extent::Map { h, w, .. } => (h, w),
            Extent::Seq { .. } => {
                // linear layers act per column
                continue;
            }
        };
        rect = match &layer.kind {
            LayerKind::Tiling { block } => Rect {
                rows: back_axis(rect.rows, ih, block.0, block.0, 0),
                cols: back_axis(rect.cols, iw, block.1, block.1, 0),
            },
            LayerKind::Conv { conv, .. } => {
                let (top, _, _) = axis_geometry(ih, conv.kernel.0, conv.stride.0, conv.padding);
                let (left, _, _) = axis_geometry(iw, conv.kernel.1, conv.stride.1, conv.padding);
                Rect {
                    rows: back_axis(rect.rows, ih, conv.kernel.0, conv.stride.0, top),
                    cols: back_axis(rect.cols, iw, conv.kernel.1, conv.stride.1, left),
                }
            }
            LayerKind::GatedConv { gated } => {
                let g = gated.gate();
                let (top, _, _) = axis_geometry(ih, g.kernel.0, 1, g.padding);
                let (left, _, _) = axis_geometry(iw, g.kernel.1, 1, g.padding);
                Rect {
                    rows: back_axis(rect.rows, ih, g.kernel.0, 1, top),
                    cols: back_axis(rect.cols, iw, g.kernel.1, 1, left),
                }
            }
            LayerKind::MaxPool { pool } => Rect {
                rows: back_axis(rect.rows, ih, pool.window.0, pool.stride.0, 0),
                cols: back_axis(rect.cols, iw, pool.window.1, pool.stride.1, 0),
            },
            LayerKind::Collapse { .. } => Rect {
                rows: (0, ih - 1),
                cols: rect.cols,
            },
            LayerKind::Linear { .. } | LayerKind::Mdlstm { .. } | LayerKind::Lstm { .. } => rect,
        };
    }
    Ok(rect)
}

/// Union membership mask `[H, W]` of the fields of `columns`.
pub fn field_union(spec: &NetworkSpec, height: usize, width: usize, columns: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; height * width];
    for &t in columns {
        let r = receptive_field(spec, height, width, t)?;
        for y in r.rows.0..=r.rows.1 {
            for x in r.cols.0..=r.cols.1 {
                mask[y * width + x] = true;
            }
        }
    }
    Ok(mask)
}

/// Write the normalized map (`max → 255`) as PGM, a side-by-side overlay as
/// PPM and the sidecar line; returns the paths written.
pub fn render_overlay(
    map: &AttentionMap,
    image: &Tensor<f32>,
    out_prefix: impl AsRef<Path>,
) -> Result<[std::path::PathBuf; 3]> {
    let (h, w) = (map.height(), map.width());
    if image.shape() != [1, h, w] {
        return Err(Error::Shape(format!(
            "map is {h}x{w} but the image has shape {:?}",
            image.shape()
        )));
    }
    let prefix = out_prefix.as_ref();
    let with_ext = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        std::path::PathBuf::from(p)
    };
    let gray = normalized_map(map);
    let map_path = with_ext(".map.pgm");
    gray.save(&map_path)?;

    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut ppm = format!("P6\n{} {}\n255\n", 2 * w, h).into_bytes();
    for y in 0..h {
        for x in 0..w {
            let g = (255.0 * (image.data()[y * w + x] - lo) / span).round() as u8;
            ppm.extend_from_slice(&[g, g, g]);
        }
        for x in 0..w {
            let g = 255.0 * (image.data()[y * w + x] - lo) / span * 0.5;
            let a = f32::from(gray.get(x, y));
            ppm.extend_from_slice(&[
                (g + a * 0.5).round() as u8,
                (g * 0.6).round() as u8,
                (g * 0.6).round() as u8,
            ]);
        }
    }
    let overlay_path = with_ext(".overlay.ppm");
    std::fs::write(&overlay_path, ppm).map_err(|e| Error::io(&overlay_path, e))?;
    let sidecar_path = with_ext(".txt");
    std::fs::write(&sidecar_path, map.sidecar()).map_err(|e| Error::io(&sidecar_path, e))?;
    Ok([map_path, overlay_path, sidecar_path])
}

/// Map scaled so its maximum is 255; an all-zero map stays black.
pub fn normalized_map(map: &AttentionMap) -> GrayImage {
    let max = map.max_abs();
    if max == 0.0 {
        log::warn!("attention map for class {} is identically zero", map.class);
    }
    let pixels = map
        .values
        .data()
        .iter()
        .map(|&v| if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 })
        .collect();
    GrayImage {
        width: map.width(),
        height: map.height(),
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{CollapseMode, ConvLayer, LinearLayer, PoolLayer};
    use crate::netzoo::{Arch, DropoutPreset, LayerSpec, VariantKnobs};
    use crate::trainer::glorot_init;

    fn small(arch: Arch, seed: u64) -> Network<f64> {
        let knobs = VariantKnobs {
            depth_multiplier: 0.25,
            class_count: 5,
            dropout: DropoutPreset::None,
            ..Default::default()
        };
        let mut net = Network::<f64>::zeros(NetworkSpec::build(arch, knobs).unwrap()).unwrap();
        glorot_init(&mut net, seed);
        net
    }

    fn input(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_f64(&[1, h, w], &d).unwrap()
    }

    fn spec_of(layers: Vec<LayerSpec>) -> NetworkSpec {
        NetworkSpec {
            arch: Arch::Cnn,
            knobs: VariantKnobs::default(),
            input_channels: 1,
            input_height: 16,
            layers,
        }
    }

    fn layer(name: &str, kind: LayerKind) -> LayerSpec {
        LayerSpec {
            name: name.into(),
            kind,
            dropout: false,
        }
    }

    #[test]
    fn single_conv_field() {
        let spec = spec_of(vec![
            layer(
                "c",
                LayerKind::Conv {
                    conv: ConvLayer::new(1, 1, (3, 3)),
                    activation: None,
                },
            ),
            layer(
                "k",
                LayerKind::Collapse {
                    mode: CollapseMode::MaxpoolHeight,
                },
            ),
            layer(
                "l",
                LayerKind::Linear {
                    linear: LinearLayer {
                        in_dim: 1,
                        out_dim: 110,
                        bias: false,
                        directions: 1,
                    },
                },
            ),
        ]);
        let r = receptive_field(&spec, 9, 9, 4).unwrap();
        assert_eq!(
            r,
            Rect {
                rows: (0, 8),
                cols: (3, 5)
            }
        );
        let r = receptive_field(&spec, 9, 9, 0).unwrap();
        assert_eq!(r.cols, (0, 1));
        assert!(receptive_field(&spec, 9, 9, 9).is_err());
    }

    #[test]
    fn stacked_downsamplers_compose() {
        let pool = |n: &str| {
            layer(
                n,
                LayerKind::MaxPool {
                    pool: PoolLayer {
                        window: (2, 2),
                        stride: (2, 2),
                    },
                },
            )
        };
        let spec = spec_of(vec![
            pool("p1"),
            pool("p2"),
            layer(
                "k",
                LayerKind::Collapse {
                    mode: CollapseMode::MaxpoolHeight,
                },
            ),
            layer(
                "l",
                LayerKind::Linear {
                    linear: LinearLayer {
                        in_dim: 1,
                        out_dim: 110,
                        bias: false,
                        directions: 1,
                    },
                },
            ),
        ]);
        // stride 4, extent k2 stride-expanded: 2 + (2 - 1) * 2 = 4
        let r = receptive_field(&spec, 16, 16, 1).unwrap();
        assert_eq!(r.cols, (4, 7));
        // brute force: which input columns change output column 1
        let net = Network::<f64>::zeros(spec.clone()).unwrap();
        let base = input(16, 16, 1);
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let b = net.bind(&mut tape, false);
            let v = tape.constant(x.clone());
            let mut mode = ForwardMode::inference();
            let y = net.forward_until(&mut tape, &b, v, &mut mode, 2).unwrap();
            tape.value(y).clone()
        };
        let y0 = run(&base);
        let mut cols = Vec::new();
        for x in 0..16 {
            let mut p = base.clone();
            for y in 0..16 {
                p.data_mut()[y * 16 + x] = 100.0;
            }
            let y1 = run(&p);
            let changed = (0..4).any(|r| y1.data()[r * 4 + 1] != y0.data()[r * 4 + 1]);
            if changed {
                cols.push(x);
            }
        }
        assert_eq!(cols, (4..=7).collect::<Vec<_>>());
    }

    #[test]
    fn zero_network_gives_zero_map() {
        let knobs = VariantKnobs {
            depth_multiplier: 0.25,
            class_count: 5,
            ..Default::default()
        };
        let net = Network::<f64>::zeros(NetworkSpec::build(Arch::Gnn1dLstm, knobs).unwrap()).unwrap();
        let m = attention_map(&net, &input(32, 24, 2), 1).unwrap();
        assert_eq!(m.max_abs(), 0.0);
        assert_eq!(m.support_width(0.01), 0);
        assert!(normalized_map(&m).pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn class_out_of_range_rejected() {
        let net = small(Arch::Cnn, 0);
        assert!(attention_map(&net, &input(32, 24, 2), 5).is_err());
    }

    #[test]
    fn seed_linearity() {
        let net = small(Arch::Gnn1dLstm, 3);
        let x = input(32, 40, 3);
        let one = attention_map_columns(&net, &x, 2, None, 1.0).unwrap();
        let two = attention_map_columns(&net, &x, 2, None, 2.0).unwrap();
        for (a, b) in one.values.data().iter().zip(two.values.data()) {
            assert!((b - 2.0 * a).abs() <= 1e-6 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn cnn_support_confined() {
        let net = small(Arch::Cnn, 4);
        let spec = net.spec().clone();
        let (h, w) = (32, 48);
        for probe in 0..6u64 {
            let x = input(h, w, 10 + probe);
            let cols = [(probe as usize) % 6];
            let m = attention_map_columns(&net, &x, 1 + probe as usize % 4, Some(&cols), 1.0).unwrap();
            let mask = field_union(&spec, h, w, &cols).unwrap();
            for (y, xx) in m.support(1e-20) {
                assert!(mask[y * w + xx], "pixel ({y},{xx}) outside field");
            }
            assert!(!m.support(1e-20).is_empty());
        }
    }

    #[test]
    fn cnn_field_matches_perturbation() {
        let net = small(Arch::Cnn, 5);
        let spec = net.spec().clone();
        let (h, w) = (64, 256);
        let x0 = input(h, w, 6);
        let base = net.infer(&x0, Schedule::Raster).unwrap();
        let t = 13;
        let field = receptive_field(&spec, h, w, t).unwrap();
        let changed = |x: &Tensor<f64>| {
            let y = net.infer(x, Schedule::Raster).unwrap();
            let c = y.shape()[1];
            (0..c).any(|k| y.data()[t * c + k] != base.data()[t * c + k])
        };
        let mut cols = Vec::new();
        for xx in 0..w {
            let mut p = x0.clone();
            for y in 0..h {
                p.data_mut()[y * w + xx] += 50.0;
            }
            if changed(&p) {
                cols.push(xx);
            }
        }
        assert_eq!(cols.first().copied(), Some(field.cols.0));
        assert_eq!(cols.last().copied(), Some(field.cols.1));
        assert_eq!(cols.len(), field.cols.1 - field.cols.0 + 1);
        let mut rows = Vec::new();
        for y in 0..h {
            let mut p = x0.clone();
            for xx in 0..w {
                p.data_mut()[y * w + xx] += 50.0;
            }
            if changed(&p) {
                rows.push(y);
            }
        }
        assert_eq!(rows, (field.rows.0..=field.rows.1).collect::<Vec<_>>());
    }

    #[test]
    fn overlay_files_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut values = vec![0.0; 6 * 8];
        values[2 * 8 + 5] = 0.25;
        let map = AttentionMap {
            class: 3,
            columns: vec![0],
            values: Tensor::from_f64(&[6, 8], &values).unwrap(),
        };
        let img = Tensor::<f32>::zeros(&[1, 6, 8]);
        let a = render_overlay(&map, &img, dir.path().join("a")).unwrap();
        let b = render_overlay(&map, &img, dir.path().join("b")).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
        let gray = GrayImage::load(&a[0]).unwrap();
        assert_eq!(gray.get(5, 2), 255);
        assert_eq!(gray.pixels.iter().filter(|&&p| p > 0).count(), 1);
        let side = std::fs::read_to_string(&a[2]).unwrap();
        assert!(side.starts_with("3\t2.5e-1\t1\n"), "{side}");
    }
}
