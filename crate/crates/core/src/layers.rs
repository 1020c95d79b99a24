//! Feed-forward building blocks: convolution, pooling, tiling, gated
//! convolution, linear maps, dropout and the 2D-to-1D collapse.
//!
//! Feature maps are `[channels, height, width]`; sequences are `[T, D]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output extent `ceil(n / stride)`, padding split top/bottom (extra row at
    /// the bottom when the total is odd).
    Same,
    /// Output extent `ceil(n / stride)`, all padding at the bottom/right.
    ValidCeil,
}

/// Zero padding `(before, after)` and output extent along one axis.
pub fn axis_geometry(n: usize, k: usize, s: usize, padding: Padding) -> (usize, usize, usize) {
    let out = n.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(n);
    let before = match padding {
        Padding::Same => total / 2,
        Padding::ValidCeil => 0,
    };
    (before, total - before, out)
}

fn expect_map<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("{what} expects [C,H,W], got {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel `(height, width)`.
    pub kernel: (usize, usize),
    /// Stride `(height, width)`.
    pub stride: (usize, usize),
    pub padding: Padding,
    pub bias: bool,
    /// 1 for full connectivity, 4 when each scan direction keeps its own
    /// channel group.
    pub groups: usize,
}

impl ConvLayer {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: Padding::Same,
            bias: true,
            groups: 1,
        }
    }

    pub fn strided(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self.padding = if stride == (1, 1) {
            Padding::Same
        } else {
            Padding::ValidCeil
        };
        self
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 || self.groups == 0 {
            return Err(Error::invalid(format!("degenerate convolution {self:?}")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "channels {}->{} not divisible into {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn param_count(&self) -> usize {
        let [o, i, kh, kw] = self.weight_shape();
        o * i * kh * kw + if self.bias { o } else { 0 }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, oh) = axis_geometry(h, self.kernel.0, self.stride.0, self.padding);
        let (_, _, ow) = axis_geometry(w, self.kernel.1, self.stride.1, self.padding);
        (oh, ow)
    }

    /// Weight-input products for an `h × w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_extent(h, w);
        let [o, i, kh, kw] = self.weight_shape();
        (oh * ow * o * i * kh * kw) as u64
    }
}

struct ConvGeometry {
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn k(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }
    fn n(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry, group: usize) -> Vec<T> {
    let n = g.n();
    let mut col = vec![T::zero(); g.k() * n];
    for ci in 0..g.cin_g {
        let plane = &x[(group * g.cin_g + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<T: Real>(col: &[T], g: &ConvGeometry, group: usize, dx: &mut [T]) {
    let n = g.n();
    for ci in 0..g.cin_g {
        let plane = &mut dx[(group * g.cin_g + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.sw + kx) as isize - g.left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            prow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2D convolution of a `[C,H,W]` map. `weight` is `[out, in/groups, kh, kw]`.
pub fn conv2d<T: Real>(tape: &mut Tape<T>, x: Var, layer: &ConvLayer, weight: Var, bias: Option<Var>) -> Result<Var> {
    layer.validate()?;
    let xv = tape.try_value(x)?;
    let (c, h, w) = expect_map(xv, "conv2d")?;
    if c != layer.in_channels {
        return Err(Error::Shape(format!(
            "conv2d expects {} input channels, got {c}",
            layer.in_channels
        )));
    }
    let ws = layer.weight_shape();
    if tape.try_value(weight)?.shape() != ws {
        return Err(Error::Shape(format!(
            "conv2d weight shape {:?}, expected {ws:?}",
            tape.value(weight).shape()
        )));
    }
    if layer.bias != bias.is_some() {
        return Err(Error::invalid("conv2d bias flag does not match arguments"));
    }
    if let Some(b) = bias {
        if tape.try_value(b)?.shape() != [layer.out_channels] {
            return Err(Error::Shape("conv2d bias shape".into()));
        }
    }
    let (top, _, oh) = axis_geometry(h, layer.kernel.0, layer.stride.0, layer.padding);
    let (left, _, ow) = axis_geometry(w, layer.kernel.1, layer.stride.1, layer.padding);
    let geo = ConvGeometry {
        cin_g: c / layer.groups,
        cout_g: layer.out_channels / layer.groups,
        kh: layer.kernel.0,
        kw: layer.kernel.1,
        sh: layer.stride.0,
        sw: layer.stride.1,
        top,
        left,
        h,
        w,
        oh,
        ow,
    };
    let groups = layer.groups;
    let (k, n) = (geo.k(), geo.n());
    let wv = tape.value(weight).data();
    let mut out = vec![T::zero(); layer.out_channels * n];
    let mut cols = Vec::with_capacity(groups);
    for gi in 0..groups {
        let col = im2col(xv.data(), &geo, gi);
        T::gemm(
            geo.cout_g,
            k,
            n,
            T::one(),
            &wv[gi * geo.cout_g * k..],
            k as isize,
            1,
            &col,
            n as isize,
            1,
            T::zero(),
            &mut out[gi * geo.cout_g * n..],
            n as isize,
            1,
        );
        cols.push(col);
    }
    if let Some(b) = bias {
        let bv = tape.value(b).data();
        for (o, row) in out.chunks_mut(n).enumerate() {
            let bo = bv[o];
            row.iter_mut().for_each(|v| *v += bo);
        }
    }
    let out = Tensor::new(&[layer.out_channels, oh, ow], out)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    let has_bias = bias.is_some();
    tape.record(
        "conv2d",
        out,
        &inputs,
        move |inp: &[&Tensor<T>], _: &Tensor<T>, gy: &Tensor<T>, needs: &[bool]| {
            let gyd = gy.data();
            let wv = inp[1].data();
            let mut dx = needs[0].then(|| vec![T::zero(); inp[0].len()]);
            let mut dw = needs[1].then(|| vec![T::zero(); inp[1].len()]);
            for (gi, col) in cols.iter().enumerate() {
                let gy_g = &gyd[gi * geo.cout_g * n..];
                if let Some(dw) = dw.as_mut() {
                    T::gemm(
                        geo.cout_g,
                        n,
                        k,
                        T::one(),
                        gy_g,
                        n as isize,
                        1,
                        col,
                        1,
                        n as isize,
                        T::zero(),
                        &mut dw[gi * geo.cout_g * k..],
                        k as isize,
                        1,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let mut dcol = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        geo.cout_g,
                        n,
                        T::one(),
                        &wv[gi * geo.cout_g * k..],
                        1,
                        k as isize,
                        gy_g,
                        n as isize,
                        1,
                        T::zero(),
                        &mut dcol,
                        n as isize,
                        1,
                    );
                    col2im_add(&dcol, &geo, gi, dx);
                }
            }
            let mut res = vec![
                dx.map(|d| Tensor::new(inp[0].shape(), d)).transpose()?,
                dw.map(|d| Tensor::new(inp[1].shape(), d)).transpose()?,
            ];
            if has_bias {
                res.push(if needs[2] {
                    let db = gyd.chunks(n).map(|r| r.iter().copied().sum()).collect();
                    Some(Tensor::new(inp[2].shape(), db)?)
                } else {
                    None
                });
            }
            Ok(res)
        },
    )
}

// ---------------------------------------------------------------------------
// pooling, tiling, collapse

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolLayer {
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl PoolLayer {
    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        // the last window must start inside the map
        let ext = |n: usize, k: usize, s: usize| (n.saturating_sub(k).div_ceil(s) + 1).min(n.saturating_sub(1) / s + 1);
        (
            ext(h, self.window.0, self.stride.0),
            ext(w, self.window.1, self.stride.1),
        )
    }
}

/// Max pooling with ceil-mode windows; out-of-map cells never win. The
/// gradient goes to the first maximal element in row-major window order.
pub fn maxpool2d<T: Real>(tape: &mut Tape<T>, x: Var, layer: &PoolLayer) -> Result<Var> {
    let (wh, ww) = layer.window;
    let (sh, sw) = layer.stride;
    if wh == 0 || ww == 0 {
        return Err(Error::invalid("max-pool window has zero area"));
    }
    if sh == 0 || sw == 0 {
        return Err(Error::invalid("max-pool stride must be positive"));
    }
    let xv = tape.try_value(x)?;
    let (c, h, w) = expect_map(xv, "maxpool2d")?;
    let (oh, ow) = layer.output_extent(h, w);
    let xd = xv.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for dy in 0..wh {
                    let y = oy * sh + dy;
                    if y >= h {
                        break;
                    }
                    for dx in 0..ww {
                        let xx = ox * sw + dx;
                        if xx >= w {
                            break;
                        }
                        let v = plane[y * w + xx];
                        if best_i == usize::MAX || v > best {
                            best = v;
                            best_i = y * w + xx;
                        }
                    }
                }
                out.push(best);
                arg.push(ci * h * w + best_i);
            }
        }
    }
    let out = Tensor::new(&[c, oh, ow], out)?;
    tape.record(
        "maxpool2d",
        out,
        &[x],
        move |inp: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
            let mut dx = vec![T::zero(); inp[0].len()];
            for (&a, &gv) in arg.iter().zip(g.data()) {
                dx[a] += gv;
            }
            Ok(vec![Some(Tensor::new(inp[0].shape(), dx)?)])
        },
    )
}

/// Space-to-depth: each `bh × bw` block becomes `bh·bw` channels, ordered
/// `c·bh·bw + dy·bw + dx`. Ragged edges are zero padded at the bottom/right.
pub fn tiling<T: Real>(tape: &mut Tape<T>, x: Var, block: (usize, usize)) -> Result<Var> {
    let (bh, bw) = block;
    if bh == 0 || bw == 0 {
        return Err(Error::invalid("tiling block has zero area"));
    }
    let xv = tape.try_value(x)?;
    let (c, h, w) = expect_map(xv, "tiling")?;
    let (oh, ow) = (h.div_ceil(bh), w.div_ceil(bw));
    let oc = c * bh * bw;
    // src[i] is the flat input index feeding output i (usize::MAX for padding)
    let mut src = vec![usize::MAX; oc * oh * ow];
    for ci in 0..c {
        for dy in 0..bh {
            for dx in 0..bw {
                let o = (ci * bh + dy) * bw + dx;
                for oy in 0..oh {
                    let y = oy * bh + dy;
                    if y >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx = ox * bw + dx;
                        if xx < w {
                            src[(o * oh + oy) * ow + ox] = (ci * h + y) * w + xx;
                        }
                    }
                }
            }
        }
    }
    let xd = xv.data();
    let out: Vec<T> = src
        .iter()
        .map(|&s| if s == usize::MAX { T::zero() } else { xd[s] })
        .collect();
    let out = Tensor::new(&[oc, oh, ow], out)?;
    tape.record(
        "tiling",
        out,
        &[x],
        move |inp: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
            let mut dx = vec![T::zero(); inp[0].len()];
            for (&s, &gv) in src.iter().zip(g.data()) {
                if s != usize::MAX {
                    dx[s] += gv;
                }
            }
            Ok(vec![Some(Tensor::new(inp[0].shape(), dx)?)])
        },
    )
}

/// Inverse of [`tiling`] on an untaped tensor, cropping to `h × w`.
pub fn untile<T: Real>(t: &Tensor<T>, block: (usize, usize), h: usize, w: usize) -> Result<Tensor<T>> {
    let (bh, bw) = block;
    let (oc, oh, ow) = expect_map(t, "untile")?;
    if oc % (bh * bw) != 0 || oh != h.div_ceil(bh) || ow != w.div_ceil(bw) {
        return Err(Error::Shape(format!(
            "cannot untile {:?} with block {block:?} into {h}x{w}",
            t.shape()
        )));
    }
    let c = oc / (bh * bw);
    let mut out = vec![T::zero(); c * h * w];
    let td = t.data();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let o = (ci * bh + y % bh) * bw + x % bw;
                out[(ci * h + y) * w + x] = td[(o * oh + y / bh) * ow + x / bw];
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollapseMode {
    /// `[C,H,W] -> [C,1,W]`, max over height.
    MaxpoolHeight,
    /// `[C,H,W] -> [C·H,1,W]`, channel `c·H + y` (rows top to bottom within
    /// each source channel).
    ConcatHeight,
}

pub fn collapse<T: Real>(tape: &mut Tape<T>, x: Var, mode: CollapseMode) -> Result<Var> {
    let xv = tape.try_value(x)?;
    let (_, h, _) = expect_map(xv, "collapse")?;
    match mode {
        CollapseMode::MaxpoolHeight => maxpool2d(
            tape,
            x,
            &PoolLayer {
                window: (h, 1),
                stride: (h, 1),
            },
        ),
        CollapseMode::ConcatHeight => tiling(tape, x, (h, 1)),
    }
}

/// `[C,1,W] -> [W,C]`: one feature vector per column.
pub fn map_to_sequence<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xv = tape.try_value(x)?;
    let (c, h, w) = expect_map(xv, "map_to_sequence")?;
    if h != 1 {
        return Err(Error::Shape(format!("map_to_sequence needs height 1, got {h}")));
    }
    let out = xv.clone().reshape(&[c, w])?.transpose2()?;
    tape.record(
        "map_to_sequence",
        out,
        &[x],
        move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
            Ok(vec![Some(g.transpose2()?.reshape(&[c, 1, w])?)])
        },
    )
}

// ---------------------------------------------------------------------------
// gated convolution

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatedConvLayer {
    pub channels: usize,
    pub kernel: (usize, usize),
}

impl GatedConvLayer {
    pub fn gate(&self) -> ConvLayer {
        ConvLayer::new(self.channels, self.channels, self.kernel)
    }

    pub fn param_count(&self) -> usize {
        self.gate().param_count()
    }
}

/// `sigmoid(conv(x)) ⊙ x`.
pub fn gated_conv<T: Real>(tape: &mut Tape<T>, x: Var, layer: &GatedConvLayer, weight: Var, bias: Var) -> Result<Var> {
    let c = expect_map(tape.try_value(x)?, "gated_conv")?.0;
    if c != layer.channels {
        return Err(Error::Shape(format!(
            "gated conv over {} channels got {c}",
            layer.channels
        )));
    }
    let pre = conv2d(tape, x, &layer.gate(), weight, Some(bias))?;
    let gate = tape.sigmoid(pre)?;
    tape.mul(gate, x)
}

// ---------------------------------------------------------------------------
// linear

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearLayer {
    /// Input features per direction.
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
    /// 1 for a plain affine map. 2 when the input is the concatenation of two
    /// direction halves, each with its own weights, whose outputs are summed.
    pub directions: usize,
}

impl LinearLayer {
    pub fn param_count(&self) -> usize {
        self.directions * (self.out_dim * self.in_dim + if self.bias { self.out_dim } else { 0 })
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.directions, self.out_dim, self.in_dim]
    }

    pub fn bias_shape(&self) -> [usize; 2] {
        [self.directions, self.out_dim]
    }

    pub fn macs(&self, positions: usize) -> u64 {
        (positions * self.directions * self.out_dim * self.in_dim) as u64
    }
}

/// Affine map applied at every position of `[..., D]`, `D = directions·in_dim`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, layer: &LinearLayer, weight: Var, bias: Option<Var>) -> Result<Var> {
    let xv = tape.try_value(x)?;
    let d = layer.directions * layer.in_dim;
    let last = *xv.shape().last().unwrap();
    if last != d {
        return Err(Error::Shape(format!(
            "linear expects trailing extent {d}, got {:?}",
            xv.shape()
        )));
    }
    if tape.try_value(weight)?.shape() != layer.weight_shape() {
        return Err(Error::Shape("linear weight shape".into()));
    }
    if layer.bias != bias.is_some() {
        return Err(Error::invalid("linear bias flag does not match arguments"));
    }
    let rows = xv.len() / d;
    let out_dim = layer.out_dim;
    let mut out = vec![T::zero(); rows * out_dim];
    // weight viewed as [out, D]: direction blocks laid side by side
    let wv = tape.value(weight).data();
    let in_dim = layer.in_dim;
    for dir in 0..layer.directions {
        T::gemm(
            rows,
            in_dim,
            out_dim,
            T::one(),
            &xv.data()[dir * in_dim..],
            d as isize,
            1,
            &wv[dir * out_dim * in_dim..],
            1,
            in_dim as isize,
            T::one(),
            &mut out,
            out_dim as isize,
            1,
        );
    }
    if let Some(b) = bias {
        let bv = tape.value(b).data();
        for row in out.chunks_mut(out_dim) {
            for dir in 0..layer.directions {
                for (o, v) in row.iter_mut().enumerate() {
                    *v += bv[dir * out_dim + o];
                }
            }
        }
    }
    let mut shape = xv.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    let out = Tensor::new(&shape, out)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    let directions = layer.directions;
    let has_bias = bias.is_some();
    tape.record(
        "linear",
        out,
        &inputs,
        move |inp: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
            let (xd, wd, gd) = (inp[0].data(), inp[1].data(), g.data());
            let mut res = Vec::with_capacity(3);
            if needs[0] {
                let mut dx = vec![T::zero(); xd.len()];
                for dir in 0..directions {
                    T::gemm(
                        rows,
                        out_dim,
                        in_dim,
                        T::one(),
                        gd,
                        out_dim as isize,
                        1,
                        &wd[dir * out_dim * in_dim..],
                        in_dim as isize,
                        1,
                        T::zero(),
                        &mut dx[dir * in_dim..],
                        d as isize,
                        1,
                    );
                }
                res.push(Some(Tensor::new(inp[0].shape(), dx)?));
            } else {
                res.push(None);
            }
            if needs[1] {
                let mut dw = vec![T::zero(); wd.len()];
                for dir in 0..directions {
                    T::gemm(
                        out_dim,
                        rows,
                        in_dim,
                        T::one(),
                        gd,
                        1,
                        out_dim as isize,
                        &xd[dir * in_dim..],
                        d as isize,
                        1,
                        T::zero(),
                        &mut dw[dir * out_dim * in_dim..],
                        in_dim as isize,
                        1,
                    );
                }
                res.push(Some(Tensor::new(inp[1].shape(), dw)?));
            } else {
                res.push(None);
            }
            if has_bias {
                if needs[2] {
                    let mut col = vec![T::zero(); out_dim];
                    for row in gd.chunks(out_dim) {
                        for (c, &v) in col.iter_mut().zip(row) {
                            *c += v;
                        }
                    }
                    let db: Vec<T> = (0..directions).flat_map(|_| col.iter().copied()).collect();
                    res.push(Some(Tensor::new(inp[2].shape(), db)?));
                } else {
                    res.push(None);
                }
            }
            Ok(res)
        },
    )
}

// ---------------------------------------------------------------------------
// dropout

/// Inverted dropout. In inference mode, or with `p == 0`, the input passes
/// through unchanged.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let xv = tape.try_value(x)?;
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..xv.len())
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
    let out = Tensor::new(xv.shape(), data)?;
    tape.record(
        "dropout",
        out,
        &[x],
        move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
            let d = g.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            Ok(vec![Some(Tensor::new(g.shape(), d)?)])
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_param_counts() {
        assert_eq!(ConvLayer::new(1, 16, (3, 3)).param_count(), 160);
        assert_eq!(
            GatedConvLayer {
                channels: 16,
                kernel: (3, 3)
            }
            .param_count(),
            2320
        );
        assert_eq!(ConvLayer::new(8, 16, (4, 2)).strided((4, 2)).param_count(), 1040);
    }

    #[test]
    fn strided_conv_extent() {
        // 500 wide × 64 high map, 2×4 (W×H) kernel and stride
        let l = ConvLayer::new(8, 16, (4, 2)).strided((4, 2));
        assert_eq!(l.output_extent(64, 500), (16, 250));
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[8, 64, 500]));
        let w = tape.constant(Tensor::zeros(&l.weight_shape()));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = conv2d(&mut tape, x, &l, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).shape(), &[16, 16, 250]);
    }

    #[test]
    fn identity_1x1_conv() {
        let x = random(&[3, 4, 5], 1);
        let l = ConvLayer::new(3, 3, (1, 1));
        let mut wdat = vec![0.0; 9];
        for i in 0..3 {
            wdat[i * 3 + i] = 1.0;
        }
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::new(&[3, 3, 1, 1], wdat).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = conv2d(&mut tape, xv, &l, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let l = ConvLayer::new(4, 6, (3, 2)).strided((2, 3)).grouped(2);
        let x = random(&[4, 7, 8], 2);
        let w = random(&l.weight_shape(), 3);
        let b = random(&[6], 4);
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let y = conv2d(&mut tape, xv, &l, wv, Some(bv)).unwrap();
        let y = tape.value(y);
        let (oh, ow) = l.output_extent(7, 8);
        let (_, _, _) = axis_geometry(7, 3, 2, l.padding);
        for o in 0..6 {
            let g = o / 3;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[o];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..2 {
                                let (iy, ix) = (oy * 2 + ky, ox * 3 + kx);
                                if iy < 7 && ix < 8 {
                                    s += w.data()[((o * 2 + ci) * 3 + ky) * 2 + kx]
                                        * x.data()[((g * 2 + ci) * 7 + iy) * 8 + ix];
                                }
                            }
                        }
                    }
                    let got = y.data()[(o * oh + oy) * ow + ox];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pool_extents() {
        let p = PoolLayer {
            window: (2, 2),
            stride: (2, 2),
        };
        assert_eq!(p.output_extent(128, 1000), (64, 500));
        let p = PoolLayer {
            window: (4, 1),
            stride: (4, 1),
        };
        assert_eq!(p.output_extent(4, 125), (1, 125));
        let p = PoolLayer {
            window: (1, 1),
            stride: (2, 3),
        };
        assert_eq!(p.output_extent(4, 7), (2, 3));
    }

    #[test]
    fn pool_constant_input_and_zero_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 4, 6], 0.7));
        let y = maxpool2d(
            &mut tape,
            x,
            &PoolLayer {
                window: (2, 2),
                stride: (2, 2),
            },
        )
        .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
        assert!(maxpool2d(
            &mut tape,
            x,
            &PoolLayer {
                window: (0, 2),
                stride: (1, 1)
            }
        )
        .is_err());
    }

    #[test]
    fn pool_ties_route_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2], 1.0), true);
        let y = maxpool2d(
            &mut tape,
            x,
            &PoolLayer {
                window: (2, 2),
                stride: (2, 2),
            },
        )
        .unwrap();
        let g = tape.backward(&[(y, Tensor::full(&[1, 1, 1], 1.0))]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tiling_extents() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 128, 1000]));
        let y = tiling(&mut tape, x, (2, 2)).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 64, 500]);
        let x = tape.constant(Tensor::zeros(&[80, 16, 125]));
        let y = tiling(&mut tape, x, (16, 1)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1280, 1, 125]);
    }

    #[test]
    fn collapse_modes() {
        let x = random(&[3, 4, 5], 9);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let m = collapse(&mut tape, xv, CollapseMode::MaxpoolHeight).unwrap();
        let c = collapse(&mut tape, xv, CollapseMode::ConcatHeight).unwrap();
        assert_eq!(tape.value(m).shape(), &[3, 1, 5]);
        assert_eq!(tape.value(c).shape(), &[12, 1, 5]);
        // concat channel c*H + y holds row y of channel c
        assert_eq!(tape.value(c).data()[(2 * 4 + 3) * 5 + 1], x.data()[(2 * 4 + 3) * 5 + 1]);
        let abs = |t: &Tensor<f64>| t.data().iter().map(|v| v.abs()).sum::<f64>();
        assert!((abs(tape.value(c)) - abs(&x)).abs() < 1e-12);
    }

    #[test]
    fn gated_conv_zero_gate_halves() {
        let x = random(&[2, 3, 4], 5);
        let l = GatedConvLayer {
            channels: 2,
            kernel: (3, 3),
        };
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::zeros(&l.gate().weight_shape()));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = gated_conv(&mut tape, xv, &l, w, b).unwrap();
        assert!(tape.value(y).max_abs_diff(&x.scale(0.5)) < 1e-15);
        let b = tape.constant(Tensor::full(&[2], -50.0));
        let y = gated_conv(&mut tape, xv, &l, w, b).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn linear_param_counts() {
        let l = |i, o, b, d| LinearLayer {
            in_dim: i,
            out_dim: o,
            bias: b,
            directions: d,
        };
        assert_eq!(l(256, 110, true, 1).param_count(), 28270);
        assert_eq!(l(128, 128, false, 2).param_count(), 32768);
        assert_eq!(l(128, 110, true, 2).param_count(), 28380);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[100_000], 1.0));
        assert_eq!(dropout(&mut tape, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut tape, x, 0.5, false, &mut rng).unwrap(), x);
        let y = dropout(&mut tape, x, 0.5, true, &mut rng).unwrap();
        let mean = tape.value(y).sum() / 100_000.0;
        assert!((0.98..=1.02).contains(&mean), "{mean}");
        assert!(dropout(&mut tape, x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn conv_gradcheck_all_inputs() {
        let l = ConvLayer::new(2, 3, (3, 3)).grouped(1);
        let x = random(&[2, 5, 4], 11);
        let w = random(&l.weight_shape(), 12);
        let b = random(&[3], 13);
        let proj = random(&[3, 5, 4], 14);
        let (wc, bc, pc) = (w.clone(), b.clone(), proj.clone());
        let r = grad_check(
            move |t, xv| {
                let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone()));
                let y = conv2d(t, xv, &l, w, Some(b))?;
                t.weighted_sum(y, &pc)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
        let l2 = ConvLayer::new(2, 3, (3, 3));
        let r = grad_check(
            move |t, wv| {
                let (xv, b) = (t.constant(x.clone()), t.constant(b.clone()));
                let y = conv2d(t, xv, &l2, wv, Some(b))?;
                t.weighted_sum(y, &proj)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }
}
