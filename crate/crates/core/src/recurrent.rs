//! Bidirectional 1D-LSTM over the width axis and four-direction 2D-MDLSTM
//! over the plane.
//!
//! The 2D recurrence can run in raster order or along anti-diagonals. Both
//! schedules evaluate every cell with the same kernel and the same operand
//! order, so their results are bitwise identical; only cross-cell scheduling
//! differs. Cell state buffers are laid out diagonal-major, which makes each
//! anti-diagonal a contiguous slice that workers can fill in parallel.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Real, Tensor};

/// How the two directions of a bidirectional layer are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Concat,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lstm1dLayer {
    pub input_dim: usize,
    /// Hidden units per direction.
    pub hidden: usize,
    pub combine: Combine,
}

impl Lstm1dLayer {
    pub fn params_per_direction(&self) -> usize {
        4 * self.hidden * (self.input_dim + self.hidden + 1)
    }

    pub fn param_count(&self) -> usize {
        2 * self.params_per_direction()
    }

    /// `[2, 4h, in]`, `[2, 4h, h]`, `[2, 4h]`; gate blocks ordered i, f, g, o.
    pub fn shapes(&self) -> [Vec<usize>; 3] {
        let (h, i) = (self.hidden, self.input_dim);
        [vec![2, 4 * h, i], vec![2, 4 * h, h], vec![2, 4 * h]]
    }

    pub fn output_dim(&self) -> usize {
        match self.combine {
            Combine::Concat => 2 * self.hidden,
            Combine::Sum => self.hidden,
        }
    }

    pub fn macs(&self, steps: usize) -> u64 {
        (steps * 2 * 4 * self.hidden * (self.input_dim + self.hidden)) as u64
    }
}

struct Lstm1dCache<T> {
    gates: Vec<T>,
    c: Vec<T>,
    tc: Vec<T>,
    h: Vec<T>,
}

/// Bidirectional LSTM over a `[T, D]` sequence.
pub fn lstm1d<T: Real>(tape: &mut Tape<T>, seq: Var, layer: &Lstm1dLayer, w: Var, u: Var, b: Var) -> Result<Var> {
    let xv = tape.try_value(seq)?;
    let (steps, dim) = match *xv.shape() {
        [t, d] => (t, d),
        ref s => return Err(Error::Shape(format!("lstm1d expects [T, D], got {s:?}"))),
    };
    if dim != layer.input_dim {
        return Err(Error::Shape(format!(
            "lstm1d expects input dim {}, got {dim}",
            layer.input_dim
        )));
    }
    let [ws, us, bs] = layer.shapes();
    for (v, s, n) in [(w, &ws, "w"), (u, &us, "u"), (b, &bs, "b")] {
        if tape.try_value(v)?.shape() != s.as_slice() {
            return Err(Error::Shape(format!("lstm1d {n} shape, expected {s:?}")));
        }
    }
    let h = layer.hidden;
    let g4 = 4 * h;
    let (wd, ud, bd) = (tape.value(w).data(), tape.value(u).data(), tape.value(b).data());
    let xd = xv.data();
    let mut caches = Vec::with_capacity(2);
    for dir in 0..2 {
        let wdir = &wd[dir * g4 * dim..(dir + 1) * g4 * dim];
        let udir = &ud[dir * g4 * h..(dir + 1) * g4 * h];
        let bdir = &bd[dir * g4..(dir + 1) * g4];
        let mut xproj = vec![T::zero(); steps * g4];
        T::gemm(
            steps,
            dim,
            g4,
            T::one(),
            xd,
            dim as isize,
            1,
            wdir,
            1,
            dim as isize,
            T::zero(),
            &mut xproj,
            g4 as isize,
            1,
        );
        let mut cache = Lstm1dCache {
            gates: vec![T::zero(); steps * g4],
            c: vec![T::zero(); steps * h],
            tc: vec![T::zero(); steps * h],
            h: vec![T::zero(); steps * h],
        };
        let zero = vec![T::zero(); h];
        for s in 0..steps {
            let t = if dir == 0 { s } else { steps - 1 - s };
            let prev = (s > 0).then(|| if dir == 0 { t - 1 } else { t + 1 });
            let (hp, cp) = match prev {
                Some(p) => (
                    cache.h[p * h..(p + 1) * h].to_vec(),
                    cache.c[p * h..(p + 1) * h].to_vec(),
                ),
                None => (zero.clone(), zero.clone()),
            };
            let gates = &mut cache.gates[t * g4..(t + 1) * g4];
            for r in 0..g4 {
                let mut acc = xproj[t * g4 + r] + bdir[r];
                let urow = &udir[r * h..(r + 1) * h];
                for k in 0..h {
                    acc += urow[k] * hp[k];
                }
                gates[r] = if (2 * h..3 * h).contains(&r) {
                    acc.tanh()
                } else {
                    sigmoid(acc)
                };
            }
            for k in 0..h {
                let (i, f, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
                let c = f * cp[k] + i * g;
                let tc = c.tanh();
                cache.c[t * h + k] = c;
                cache.tc[t * h + k] = tc;
                cache.h[t * h + k] = o * tc;
            }
        }
        caches.push(cache);
    }
    let out_dim = layer.output_dim();
    let mut out = vec![T::zero(); steps * out_dim];
    for t in 0..steps {
        for k in 0..h {
            let (f, bk) = (caches[0].h[t * h + k], caches[1].h[t * h + k]);
            match layer.combine {
                Combine::Concat => {
                    out[t * out_dim + k] = f;
                    out[t * out_dim + h + k] = bk;
                }
                Combine::Sum => out[t * out_dim + k] = f + bk,
            }
        }
    }
    let out = Tensor::new(&[steps, out_dim], out)?;
    let combine = layer.combine;
    tape.record(
        "lstm1d",
        out,
        &[seq, w, u, b],
        move |inp: &[&Tensor<T>], _: &Tensor<T>, gy: &Tensor<T>, needs: &[bool]| {
            let (xd, wd, ud) = (inp[0].data(), inp[1].data(), inp[2].data());
            let gyd = gy.data();
            let mut dx = vec![T::zero(); xd.len()];
            let mut dw = vec![T::zero(); wd.len()];
            let mut du = vec![T::zero(); ud.len()];
            let mut db = vec![T::zero(); 2 * g4];
            for (dir, cache) in caches.iter().enumerate() {
                let wdir = &wd[dir * g4 * dim..(dir + 1) * g4 * dim];
                let udir = &ud[dir * g4 * h..(dir + 1) * g4 * h];
                let mut dpre = vec![T::zero(); steps * g4];
                let mut hprev = vec![T::zero(); steps * h];
                let mut dh_next = vec![T::zero(); h];
                let mut dc_next = vec![T::zero(); h];
                let mut f_next = vec![T::zero(); h];
                for s in (0..steps).rev() {
                    let t = if dir == 0 { s } else { steps - 1 - s };
                    let prev = (s > 0).then(|| if dir == 0 { t - 1 } else { t + 1 });
                    let gates = &cache.gates[t * g4..(t + 1) * g4];
                    let dp = &mut dpre[t * g4..(t + 1) * g4];
                    for k in 0..h {
                        let gk = match combine {
                            Combine::Concat => gyd[t * 2 * h + dir * h + k],
                            Combine::Sum => gyd[t * h + k],
                        };
                        let dh = gk + dh_next[k];
                        let (i, f, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
                        let tc = cache.tc[t * h + k];
                        let dc = dh * o * (T::one() - tc * tc) + dc_next[k] * f_next[k];
                        let cp = prev.map_or(T::zero(), |p| cache.c[p * h + k]);
                        dp[k] = dc * g * i * (T::one() - i);
                        dp[h + k] = dc * cp * f * (T::one() - f);
                        dp[2 * h + k] = dc * i * (T::one() - g * g);
                        dp[3 * h + k] = dh * tc * o * (T::one() - o);
                        dc_next[k] = dc;
                        f_next[k] = f;
                    }
                    for k in 0..h {
                        let mut acc = T::zero();
                        for r in 0..g4 {
                            acc += udir[r * h + k] * dp[r];
                        }
                        dh_next[k] = acc;
                    }
                    if let Some(p) = prev {
                        hprev[t * h..(t + 1) * h].copy_from_slice(&cache.h[p * h..(p + 1) * h]);
                    }
                }
                if needs[0] {
                    T::gemm(
                        steps,
                        g4,
                        dim,
                        T::one(),
                        &dpre,
                        g4 as isize,
                        1,
                        wdir,
                        dim as isize,
                        1,
                        T::one(),
                        &mut dx,
                        dim as isize,
                        1,
                    );
                }
                T::gemm(
                    g4,
                    steps,
                    dim,
                    T::one(),
                    &dpre,
                    1,
                    g4 as isize,
                    xd,
                    dim as isize,
                    1,
                    T::zero(),
                    &mut dw[dir * g4 * dim..],
                    dim as isize,
                    1,
                );
                T::gemm(
                    g4,
                    steps,
                    h,
                    T::one(),
                    &dpre,
                    1,
                    g4 as isize,
                    &hprev,
                    h as isize,
                    1,
                    T::zero(),
                    &mut du[dir * g4 * h..],
                    h as isize,
                    1,
                );
                for row in dpre.chunks(g4) {
                    for (acc, &v) in db[dir * g4..(dir + 1) * g4].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            Ok(vec![
                needs[0].then(|| Tensor::new(inp[0].shape(), dx)).transpose()?,
                needs[1].then(|| Tensor::new(inp[1].shape(), dw)).transpose()?,
                needs[2].then(|| Tensor::new(inp[2].shape(), du)).transpose()?,
                needs[3].then(|| Tensor::new(inp[3].shape(), db)).transpose()?,
            ])
        },
    )
}

// ---------------------------------------------------------------------------
// 2D-MDLSTM

/// Scan origins, in output channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::TopLeft,
        ScanDirection::TopRight,
        ScanDirection::BottomLeft,
        ScanDirection::BottomRight,
    ];

    /// `(flip_rows, flip_cols)` mapping the scan frame onto the map.
    pub fn flips(self) -> (bool, bool) {
        match self {
            ScanDirection::TopLeft => (false, false),
            ScanDirection::TopRight => (false, true),
            ScanDirection::BottomLeft => (true, false),
            ScanDirection::BottomRight => (true, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mdlstm2dLayer {
    /// Input channels read by each direction.
    pub input_dim: usize,
    /// Hidden units per direction.
    pub hidden: usize,
    /// When set, direction `d` reads channels `[d·in, (d+1)·in)`; otherwise
    /// every direction reads all `in` channels.
    pub grouped_input: bool,
    /// Halve the two forget contributions in the cell update.
    #[serde(default)]
    pub half_forget: bool,
}

impl Mdlstm2dLayer {
    pub fn params_per_direction(&self) -> usize {
        5 * self.hidden * (self.input_dim + 2 * self.hidden + 1)
    }

    pub fn param_count(&self) -> usize {
        4 * self.params_per_direction()
    }

    /// `[4, 5h, in]`, `[4, 5h, 2h]`, `[4, 5h]`; gate blocks ordered
    /// i, f_x, f_y, g, o; recurrent columns are left neighbor then up neighbor.
    pub fn shapes(&self) -> [Vec<usize>; 3] {
        let (h, i) = (self.hidden, self.input_dim);
        [vec![4, 5 * h, i], vec![4, 5 * h, 2 * h], vec![4, 5 * h]]
    }

    pub fn input_channels(&self) -> usize {
        if self.grouped_input {
            4 * self.input_dim
        } else {
            self.input_dim
        }
    }

    pub fn output_channels(&self) -> usize {
        4 * self.hidden
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w * 4 * 5 * self.hidden * (self.input_dim + 2 * self.hidden)) as u64
    }
}

/// Cross-cell execution order of the 2D recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Row by row from the scan origin.
    Raster,
    /// Anti-diagonal by anti-diagonal, cells of one diagonal split across
    /// `workers` threads.
    Wavefront { workers: usize },
}

/// Anti-diagonal layout of an `h × w` grid in the scan frame.
#[derive(Clone, Debug)]
pub struct WavefrontGrid {
    pub rows: usize,
    pub cols: usize,
    diag_start: Vec<usize>,
}

impl WavefrontGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        let ndiag = rows + cols - 1;
        let mut diag_start = Vec::with_capacity(ndiag + 1);
        let mut acc = 0;
        for d in 0..ndiag {
            diag_start.push(acc);
            acc += Self::row_range_of(rows, cols, d).len();
        }
        diag_start.push(acc);
        Self { rows, cols, diag_start }
    }

    fn row_range_of(rows: usize, cols: usize, d: usize) -> std::ops::Range<usize> {
        let lo = d.saturating_sub(cols - 1);
        let hi = d.min(rows - 1);
        lo..hi + 1
    }

    pub fn diagonals(&self) -> usize {
        self.rows + self.cols - 1
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Rows of the cells on diagonal `d`, in storage order.
    pub fn row_range(&self, d: usize) -> std::ops::Range<usize> {
        Self::row_range_of(self.rows, self.cols, d)
    }

    pub fn span(&self, d: usize) -> std::ops::Range<usize> {
        self.diag_start[d]..self.diag_start[d + 1]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        let d = i + j;
        self.diag_start[d] + i - d.saturating_sub(self.cols - 1)
    }

    #[inline]
    pub fn cell(&self, d: usize, offset: usize) -> (usize, usize) {
        let i = d.saturating_sub(self.cols - 1) + offset;
        (i, d - i)
    }
}

fn pool(workers: usize) -> Arc<rayon::ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let mut map = POOLS
        .get_or_init(|| Mutex::new(HashMap::new()))
        .lock()
        .expect("pool registry poisoned");
    map.entry(workers)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("failed to build worker pool"),
            )
        })
        .clone()
}

/// Per-direction state after a forward scan, diagonal-major.
struct DirState<T> {
    gates: Vec<T>,
    c: Vec<T>,
    tc: Vec<T>,
    h: Vec<T>,
}

/// Read-only operands of one direction's scan.
struct DirParams<'a, T> {
    hidden: usize,
    /// `[H·W, 5h]` input projections in map (row-major) order.
    xproj: &'a [T],
    bias: &'a [T],
    /// `[5h, 2h]`.
    u: &'a [T],
    half: bool,
    grid: &'a WavefrontGrid,
    flips: (bool, bool),
    width: usize,
    height: usize,
}

impl<T> DirParams<'_, T> {
    #[inline]
    fn map_pos(&self, i: usize, j: usize) -> usize {
        let y = if self.flips.0 { self.height - 1 - i } else { i };
        let x = if self.flips.1 { self.width - 1 - j } else { j };
        y * self.width + x
    }
}

/// One cell of the forward recurrence. `prior` holds the state of all
/// earlier diagonals (indices below the current diagonal's start).
#[allow(clippy::too_many_arguments)]
#[inline]
fn cell_forward<T: Real>(
    p: &DirParams<'_, T>,
    i: usize,
    j: usize,
    prior_h: &[T],
    prior_c: &[T],
    gates: &mut [T],
    c_out: &mut [T],
    tc_out: &mut [T],
    h_out: &mut [T],
) {
    let hd = p.hidden;
    let g5 = 5 * hd;
    let left = (j > 0).then(|| p.grid.index(i, j - 1));
    let up = (i > 0).then(|| p.grid.index(i - 1, j));
    let xp = &p.xproj[p.map_pos(i, j) * g5..][..g5];
    for r in 0..g5 {
        let mut acc = xp[r] + p.bias[r];
        let urow = &p.u[r * 2 * hd..(r + 1) * 2 * hd];
        if let Some(l) = left {
            let hl = &prior_h[l * hd..(l + 1) * hd];
            for k in 0..hd {
                acc += urow[k] * hl[k];
            }
        }
        if let Some(t) = up {
            let hu = &prior_h[t * hd..(t + 1) * hd];
            for k in 0..hd {
                acc += urow[hd + k] * hu[k];
            }
        }
        gates[r] = if (3 * hd..4 * hd).contains(&r) {
            acc.tanh()
        } else {
            sigmoid(acc)
        };
    }
    let scale = if p.half { T::from_f64(0.5) } else { T::one() };
    for k in 0..hd {
        let (ig, fx, fy, g, o) = (
            gates[k],
            gates[hd + k],
            gates[2 * hd + k],
            gates[3 * hd + k],
            gates[4 * hd + k],
        );
        let cl = left.map_or(T::zero(), |l| prior_c[l * hd + k]);
        let cu = up.map_or(T::zero(), |t| prior_c[t * hd + k]);
        let c = ig * g + scale * (fx * cl + fy * cu);
        let tc = c.tanh();
        c_out[k] = c;
        tc_out[k] = tc;
        h_out[k] = o * tc;
    }
}

fn scan_forward<T: Real>(p: &DirParams<'_, T>, schedule: Schedule) -> DirState<T> {
    let hd = p.hidden;
    let g5 = 5 * hd;
    let n = p.grid.cells();
    let mut st = DirState {
        gates: vec![T::zero(); n * g5],
        c: vec![T::zero(); n * hd],
        tc: vec![T::zero(); n * hd],
        h: vec![T::zero(); n * hd],
    };
    match schedule {
        Schedule::Raster => {
            for i in 0..p.grid.rows {
                for j in 0..p.grid.cols {
                    let k = p.grid.index(i, j);
                    let (ph, ch) = st.h.split_at_mut(k * hd);
                    let (pc, cc) = st.c.split_at_mut(k * hd);
                    cell_forward(
                        p,
                        i,
                        j,
                        ph,
                        pc,
                        &mut st.gates[k * g5..(k + 1) * g5],
                        &mut cc[..hd],
                        &mut st.tc[k * hd..(k + 1) * hd],
                        &mut ch[..hd],
                    );
                }
            }
        }
        Schedule::Wavefront { workers } => {
            let pool = (workers > 1).then(|| pool(workers));
            for d in 0..p.grid.diagonals() {
                let span = p.grid.span(d);
                let len = span.len();
                let (ph, rh) = st.h.split_at_mut(span.start * hd);
                let (pc, rc) = st.c.split_at_mut(span.start * hd);
                let gates = &mut st.gates[span.start * g5..span.end * g5];
                let tcs = &mut st.tc[span.start * hd..span.end * hd];
                let (hs, cs) = (&mut rh[..len * hd], &mut rc[..len * hd]);
                let (ph, pc) = (&*ph, &*pc);
                let work = |off: usize, g: &mut [T], c: &mut [T], tc: &mut [T], h: &mut [T]| {
                    let (i, j) = p.grid.cell(d, off);
                    cell_forward(p, i, j, ph, pc, g, c, tc, h);
                };
                match &pool {
                    Some(pool) if len >= 2 => pool.install(|| {
                        gates
                            .par_chunks_mut(g5)
                            .zip(cs.par_chunks_mut(hd))
                            .zip(tcs.par_chunks_mut(hd))
                            .zip(hs.par_chunks_mut(hd))
                            .enumerate()
                            .for_each(|(off, (((g, c), tc), h))| work(off, g, c, tc, h))
                    }),
                    _ => {
                        for (off, (((g, c), tc), h)) in gates
                            .chunks_mut(g5)
                            .zip(cs.chunks_mut(hd))
                            .zip(tcs.chunks_mut(hd))
                            .zip(hs.chunks_mut(hd))
                            .enumerate()
                        {
                            work(off, g, c, tc, h);
                        }
                    }
                }
            }
        }
    }
    st
}

/// One cell of the reverse sweep. `later_*` hold diagonals after the
/// current one, offset so that index `k - later_base` addresses cell `k`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn cell_backward<T: Real>(
    p: &DirParams<'_, T>,
    st: &DirState<T>,
    gy: &[T],
    dir: usize,
    i: usize,
    j: usize,
    later_base: usize,
    later_dpre: &[T],
    later_dc: &[T],
    dpre: &mut [T],
    dc_out: &mut [T],
) {
    let hd = p.hidden;
    let g5 = 5 * hd;
    let hw = p.width * p.height;
    let k = p.grid.index(i, j);
    let right = (j + 1 < p.grid.cols).then(|| p.grid.index(i, j + 1) - later_base);
    let down = (i + 1 < p.grid.rows).then(|| p.grid.index(i + 1, j) - later_base);
    let left = (j > 0).then(|| p.grid.index(i, j - 1));
    let up = (i > 0).then(|| p.grid.index(i - 1, j));
    let pos = p.map_pos(i, j);
    let gates = &st.gates[k * g5..(k + 1) * g5];
    let scale = if p.half { T::from_f64(0.5) } else { T::one() };
    for m in 0..hd {
        let mut dh = gy[(dir * hd + m) * hw + pos];
        if let Some(r) = right {
            let dp = &later_dpre[r * g5..(r + 1) * g5];
            for q in 0..g5 {
                dh += p.u[q * 2 * hd + m] * dp[q];
            }
        }
        if let Some(b) = down {
            let dp = &later_dpre[b * g5..(b + 1) * g5];
            for q in 0..g5 {
                dh += p.u[q * 2 * hd + hd + m] * dp[q];
            }
        }
        let (ig, fx, fy, g, o) = (
            gates[m],
            gates[hd + m],
            gates[2 * hd + m],
            gates[3 * hd + m],
            gates[4 * hd + m],
        );
        let tc = st.tc[k * hd + m];
        let mut dc = dh * o * (T::one() - tc * tc);
        if let Some(r) = right {
            let fx_r = later_dpre_gate(st, p, r + later_base, hd + m);
            dc += later_dc[r * hd + m] * fx_r * scale;
        }
        if let Some(b) = down {
            let fy_d = later_dpre_gate(st, p, b + later_base, 2 * hd + m);
            dc += later_dc[b * hd + m] * fy_d * scale;
        }
        let cl = left.map_or(T::zero(), |l| st.c[l * hd + m]);
        let cu = up.map_or(T::zero(), |t| st.c[t * hd + m]);
        dpre[m] = dc * g * ig * (T::one() - ig);
        dpre[hd + m] = dc * scale * cl * fx * (T::one() - fx);
        dpre[2 * hd + m] = dc * scale * cu * fy * (T::one() - fy);
        dpre[3 * hd + m] = dc * ig * (T::one() - g * g);
        dpre[4 * hd + m] = dh * tc * o * (T::one() - o);
        dc_out[m] = dc;
    }
}

#[inline]
fn later_dpre_gate<T: Real>(st: &DirState<T>, p: &DirParams<'_, T>, cell: usize, gate: usize) -> T {
    st.gates[cell * 5 * p.hidden + gate]
}

/// Reverse sweep for one direction; returns `dpre` (diagonal-major).
fn scan_backward<T: Real>(p: &DirParams<'_, T>, st: &DirState<T>, gy: &[T], dir: usize, schedule: Schedule) -> Vec<T> {
    let hd = p.hidden;
    let g5 = 5 * hd;
    let n = p.grid.cells();
    let mut dpre = vec![T::zero(); n * g5];
    let mut dc = vec![T::zero(); n * hd];
    match schedule {
        Schedule::Raster => {
            for i in (0..p.grid.rows).rev() {
                for j in (0..p.grid.cols).rev() {
                    let k = p.grid.index(i, j);
                    let d = i + j;
                    let base = p.grid.span(d).end;
                    let (head, later_p) = dpre.split_at_mut(base * g5);
                    let (head_c, later_c) = dc.split_at_mut(base * hd);
                    cell_backward(
                        p,
                        st,
                        gy,
                        dir,
                        i,
                        j,
                        base,
                        later_p,
                        later_c,
                        &mut head[k * g5..(k + 1) * g5],
                        &mut head_c[k * hd..(k + 1) * hd],
                    );
                }
            }
        }
        Schedule::Wavefront { workers } => {
            let pool = (workers > 1).then(|| pool(workers));
            for d in (0..p.grid.diagonals()).rev() {
                let span = p.grid.span(d);
                let len = span.len();
                let (head, later_p) = dpre.split_at_mut(span.end * g5);
                let (head_c, later_c) = dc.split_at_mut(span.end * hd);
                let cur_p = &mut head[span.start * g5..];
                let cur_c = &mut head_c[span.start * hd..];
                let (later_p, later_c) = (&*later_p, &*later_c);
                let work = |off: usize, dp: &mut [T], dcv: &mut [T]| {
                    let (i, j) = p.grid.cell(d, off);
                    cell_backward(p, st, gy, dir, i, j, span.end, later_p, later_c, dp, dcv);
                };
                match &pool {
                    Some(pool) if len >= 2 => pool.install(|| {
                        cur_p
                            .par_chunks_mut(g5)
                            .zip(cur_c.par_chunks_mut(hd))
                            .enumerate()
                            .for_each(|(off, (dp, dcv))| work(off, dp, dcv))
                    }),
                    _ => {
                        for (off, (dp, dcv)) in cur_p.chunks_mut(g5).zip(cur_c.chunks_mut(hd)).enumerate() {
                            work(off, dp, dcv);
                        }
                    }
                }
            }
        }
    }
    dpre
}

/// Four-direction 2D-LSTM over a `[C, H, W]` map, producing `[4h, H, W]` with
/// direction blocks in the order TL, TR, BL, BR.
pub fn mdlstm2d<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &Mdlstm2dLayer,
    w: Var,
    u: Var,
    b: Var,
    schedule: Schedule,
) -> Result<Var> {
    if let Schedule::Wavefront { workers: 0 } = schedule {
        return Err(Error::invalid("wavefront schedule needs at least one worker"));
    }
    let xv = tape.try_value(x)?;
    let (c, height, width) = match *xv.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::Shape(format!("mdlstm2d expects [C,H,W], got {s:?}"))),
    };
    if c != layer.input_channels() {
        return Err(Error::Shape(format!(
            "mdlstm2d expects {} input channels, got {c}",
            layer.input_channels()
        )));
    }
    let [ws, us, bs] = layer.shapes();
    for (v, s, n) in [(w, &ws, "w"), (u, &us, "u"), (b, &bs, "b")] {
        if tape.try_value(v)?.shape() != s.as_slice() {
            return Err(Error::Shape(format!("mdlstm2d {n} shape, expected {s:?}")));
        }
    }
    let hd = layer.hidden;
    let g5 = 5 * hd;
    let din = layer.input_dim;
    let hw = height * width;
    let grids: Vec<WavefrontGrid> = vec![WavefrontGrid::new(height, width)];
    let grid = &grids[0];
    let (wd, ud, bd) = (tape.value(w).data(), tape.value(u).data(), tape.value(b).data());
    let xd = xv.data();
    let mut out = vec![T::zero(); 4 * hd * hw];
    let mut states = Vec::with_capacity(4);
    let mut xprojs = Vec::with_capacity(4);
    for (dir, sd) in ScanDirection::ALL.iter().enumerate() {
        let coff = if layer.grouped_input { dir * din } else { 0 };
        let mut xproj = vec![T::zero(); hw * g5];
        T::gemm(
            hw,
            din,
            g5,
            T::one(),
            &xd[coff * hw..],
            1,
            hw as isize,
            &wd[dir * g5 * din..],
            1,
            din as isize,
            T::zero(),
            &mut xproj,
            g5 as isize,
            1,
        );
        let p = DirParams {
            hidden: hd,
            xproj: &xproj,
            bias: &bd[dir * g5..(dir + 1) * g5],
            u: &ud[dir * g5 * 2 * hd..(dir + 1) * g5 * 2 * hd],
            half: layer.half_forget,
            grid,
            flips: sd.flips(),
            width,
            height,
        };
        let st = scan_forward(&p, schedule);
        for i in 0..height {
            for j in 0..width {
                let k = grid.index(i, j);
                let pos = p.map_pos(i, j);
                for m in 0..hd {
                    out[(dir * hd + m) * hw + pos] = st.h[k * hd + m];
                }
            }
        }
        states.push(st);
        xprojs.push(xproj);
    }
    let out = Tensor::new(&[4 * hd, height, width], out)?;
    let half = layer.half_forget;
    let grouped = layer.grouped_input;
    tape.record(
        "mdlstm2d",
        out,
        &[x, w, u, b],
        move |inp: &[&Tensor<T>], _: &Tensor<T>, gy: &Tensor<T>, needs: &[bool]| {
            let grid = &grids[0];
            let (xd, wd, ud, bd) = (inp[0].data(), inp[1].data(), inp[2].data(), inp[3].data());
            let mut dx = vec![T::zero(); xd.len()];
            let mut dw = vec![T::zero(); wd.len()];
            let mut du = vec![T::zero(); ud.len()];
            let mut db = vec![T::zero(); bd.len()];
            let n = grid.cells();
            for (dir, sd) in ScanDirection::ALL.iter().enumerate() {
                let p = DirParams {
                    hidden: hd,
                    xproj: &xprojs[dir],
                    bias: &bd[dir * g5..(dir + 1) * g5],
                    u: &ud[dir * g5 * 2 * hd..(dir + 1) * g5 * 2 * hd],
                    half,
                    grid,
                    flips: sd.flips(),
                    width,
                    height,
                };
                let st = &states[dir];
                let dpre = scan_backward(&p, st, gy.data(), dir, schedule);
                // dpre in map order for the input-side products
                let mut dpre_map = vec![T::zero(); hw * g5];
                let mut neigh = vec![T::zero(); n * 2 * hd];
                for i in 0..height {
                    for j in 0..width {
                        let k = grid.index(i, j);
                        let pos = p.map_pos(i, j);
                        dpre_map[pos * g5..(pos + 1) * g5].copy_from_slice(&dpre[k * g5..(k + 1) * g5]);
                        if j > 0 {
                            let l = grid.index(i, j - 1);
                            neigh[k * 2 * hd..k * 2 * hd + hd].copy_from_slice(&st.h[l * hd..(l + 1) * hd]);
                        }
                        if i > 0 {
                            let t = grid.index(i - 1, j);
                            neigh[k * 2 * hd + hd..(k + 1) * 2 * hd].copy_from_slice(&st.h[t * hd..(t + 1) * hd]);
                        }
                    }
                }
                let coff = if grouped { dir * din } else { 0 };
                // dW = dpreᵀ · X
                T::gemm(
                    g5,
                    hw,
                    din,
                    T::one(),
                    &dpre_map,
                    1,
                    g5 as isize,
                    &xd[coff * hw..],
                    1,
                    hw as isize,
                    T::zero(),
                    &mut dw[dir * g5 * din..],
                    din as isize,
                    1,
                );
                // dU = dpreᵀ · [h_left, h_up]
                T::gemm(
                    g5,
                    n,
                    2 * hd,
                    T::one(),
                    &dpre,
                    1,
                    g5 as isize,
                    &neigh,
                    2 * hd as isize,
                    1,
                    T::zero(),
                    &mut du[dir * g5 * 2 * hd..],
                    2 * hd as isize,
                    1,
                );
                for row in dpre.chunks(g5) {
                    for (acc, &v) in db[dir * g5..(dir + 1) * g5].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                if needs[0] {
                    // dX[ch, pos] += Σ_r W[r, ch] · dpre[pos, r]
                    T::gemm(
                        din,
                        g5,
                        hw,
                        T::one(),
                        &wd[dir * g5 * din..],
                        1,
                        din as isize,
                        &dpre_map,
                        1,
                        g5 as isize,
                        T::one(),
                        &mut dx[coff * hw..],
                        hw as isize,
                        1,
                    );
                }
            }
            Ok(vec![
                needs[0].then(|| Tensor::new(inp[0].shape(), dx)).transpose()?,
                needs[1].then(|| Tensor::new(inp[1].shape(), dw)).transpose()?,
                needs[2].then(|| Tensor::new(inp[2].shape(), du)).transpose()?,
                needs[3].then(|| Tensor::new(inp[3].shape(), db)).transpose()?,
            ])
        },
    )
}

/// Direct per-cell evaluation of [`mdlstm2d`]'s forward pass, one direction
/// at a time in plain scan order with no shared buffers.
pub fn mdlstm2d_reference(
    x: &Tensor<f64>,
    layer: &Mdlstm2dLayer,
    w: &Tensor<f64>,
    u: &Tensor<f64>,
    b: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let (c, height, width) = match *x.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::Shape(format!("mdlstm2d expects [C,H,W], got {s:?}"))),
    };
    if c != layer.input_channels() {
        return Err(Error::Shape(format!(
            "mdlstm2d expects {} input channels, got {c}",
            layer.input_channels()
        )));
    }
    let hd = layer.hidden;
    let din = layer.input_dim;
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let forget_scale = if layer.half_forget { 0.5 } else { 1.0 };
    let [ws, us, bs] = layer.shapes();
    for (t, s, n) in [(w, &ws, "w"), (u, &us, "u"), (b, &bs, "b")] {
        if t.shape() != s.as_slice() {
            return Err(Error::Shape(format!("mdlstm2d {n} shape, expected {s:?}")));
        }
    }
    let (xd, wd, ud, bd) = (x.data(), w.data(), u.data(), b.data());
    let mut out = vec![0.0; 4 * hd * height * width];
    for (dir, sd) in ScanDirection::ALL.iter().enumerate() {
        let (flip_rows, flip_cols) = sd.flips();
        let coff = if layer.grouped_input { dir * din } else { 0 };
        let mut hs = vec![vec![vec![0.0; hd]; width]; height];
        let mut cs = hs.clone();
        for i in 0..height {
            for j in 0..width {
                let y = if flip_rows { height - 1 - i } else { i };
                let xx = if flip_cols { width - 1 - j } else { j };
                let zeros = vec![0.0; hd];
                let (hl, cl) = if j > 0 {
                    (&hs[i][j - 1], &cs[i][j - 1])
                } else {
                    (&zeros, &zeros)
                };
                let (hu, cu) = if i > 0 {
                    (&hs[i - 1][j], &cs[i - 1][j])
                } else {
                    (&zeros, &zeros)
                };
                let pre = |gate: usize, k: usize| {
                    let r = gate * hd + k;
                    let mut acc = bd[dir * 5 * hd + r];
                    for ch in 0..din {
                        acc += wd[(dir * 5 * hd + r) * din + ch] * xd[((coff + ch) * height + y) * width + xx];
                    }
                    for m in 0..hd {
                        acc += ud[(dir * 5 * hd + r) * 2 * hd + m] * hl[m]
                            + ud[(dir * 5 * hd + r) * 2 * hd + hd + m] * hu[m];
                    }
                    acc
                };
                let mut hnew = vec![0.0; hd];
                let mut cnew = vec![0.0; hd];
                for k in 0..hd {
                    let ig = sig(pre(0, k));
                    let fx = sig(pre(1, k));
                    let fy = sig(pre(2, k));
                    let g = pre(3, k).tanh();
                    let o = sig(pre(4, k));
                    cnew[k] = ig * g + forget_scale * (fx * cl[k] + fy * cu[k]);
                    hnew[k] = o * cnew[k].tanh();
                }
                for k in 0..hd {
                    out[((dir * hd + k) * height + y) * width + xx] = hnew[k];
                }
                hs[i][j] = hnew;
                cs[i][j] = cnew;
            }
        }
    }
    Tensor::new(&[4 * hd, height, width], out)
}
