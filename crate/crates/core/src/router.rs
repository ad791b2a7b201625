//! Top-k routing.
//!
//! Three forms share one score definition, `s = x·W_r + b` accumulated over
//! `d_h` in order:
//!
//! * [`route_naive`] materializes the full score tensor in HBM and selects
//!   from it in a second kernel.
//! * [`route_ioaware_fwd`] streams expert blocks through SRAM and keeps a
//!   running top-k of packed score/index words per token, so the score tensor
//!   never reaches HBM.
//! * [`route_ioaware_bwd`] propagates gradients only through the `k`
//!   selected columns of `W_r`.
//!
//! The load-balancing bias steers selection but is removed from the returned
//! scores.

use crate::error::{Error, Result};
use crate::memory::Arena;
use crate::rng::Rng;
use crate::tensor::{matmul_into, softmax_in_place, Scalar, Tensor};

/// Router weights `[N_h, d_h, N_e]` and selection bias `[N_h, N_e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T = f32> {
    pub w_r: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> RouterParams<T> {
    pub fn new(w_r: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let p = RouterParams { w_r, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn init(rng: &mut Rng, n_heads: usize, d_h: usize, n_experts: usize, std: f64) -> Self {
        RouterParams {
            w_r: rng.normal_tensor(&[n_heads, d_h, n_experts], std),
            bias: Tensor::zeros(&[n_heads, n_experts]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.w_r.shape();
        if ws.len() != 3 || self.bias.shape() != [ws[0], ws[2]] {
            return Err(Error::Shape(format!(
                "router weights {:?} and bias {:?} disagree",
                ws,
                self.bias.shape()
            )));
        }
        Ok(())
    }

    pub fn n_heads(&self) -> usize {
        self.w_r.shape()[0]
    }

    pub fn d_h(&self) -> usize {
        self.w_r.shape()[1]
    }

    pub fn n_experts(&self) -> usize {
        self.w_r.shape()[2]
    }

    /// Parameters of a single head as a one-head router.
    pub fn head(&self, h: usize) -> RouterParams<T> {
        let (d_h, n_e) = (self.d_h(), self.n_experts());
        let w = self.w_r.data()[h * d_h * n_e..(h + 1) * d_h * n_e].to_vec();
        let b = self.bias.data()[h * n_e..(h + 1) * n_e].to_vec();
        RouterParams {
            w_r: Tensor::from_vec(&[1, d_h, n_e], w).unwrap(),
            bias: Tensor::from_vec(&[1, n_e], b).unwrap(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> RouterParams<U> {
        RouterParams { w_r: self.w_r.cast(), bias: self.bias.cast() }
    }
}

/// Selected experts per `(b, t, h)`: unbiased scores and expert ids, both
/// shaped `[B, T, N_h, k]` and listed in descending biased-score order.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKResult<T = f32> {
    pub scores: Tensor<T>,
    pub indices: Tensor<u32>,
}

impl<T: Scalar> TopKResult<T> {
    pub fn k(&self) -> usize {
        *self.indices.shape().last().unwrap()
    }

    /// `(B, T, N_h, k)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.indices.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Indices of one head as a flat `[B·T, k]` row-major list.
    pub fn head_indices(&self, h: usize) -> Vec<u32> {
        let (b, t, nh, k) = self.dims();
        let mut out = Vec::with_capacity(b * t * k);
        for row in 0..b * t {
            let base = (row * nh + h) * k;
            out.extend_from_slice(&self.indices.data()[base..base + k]);
        }
        out
    }

    pub fn head_scores(&self, h: usize) -> Vec<T> {
        let (b, t, nh, k) = self.dims();
        let mut out = Vec::with_capacity(b * t * k);
        for row in 0..b * t {
            let base = (row * nh + h) * k;
            out.extend_from_slice(&self.scores.data()[base..base + k]);
        }
        out
    }

    /// Checks the structural invariants: ids in range and distinct per row.
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        let k = self.k();
        for row in self.indices.data().chunks(k) {
            for (i, &e) in row.iter().enumerate() {
                if e as usize >= n_experts {
                    return Err(Error::IndexOutOfRange { index: e as usize, bound: n_experts });
                }
                if row[..i].contains(&e) {
                    return Err(Error::InvalidParameter(format!("expert {e} selected twice")));
                }
            }
        }
        Ok(())
    }
}

/// A 64-bit arg-max word for FP32 scores: ordered score bits in the high
/// half, complemented expert id in the low half. Larger word = larger score,
/// and on equal scores the lower expert id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PackedScoreIndex(pub u64);

impl PackedScoreIndex {
    pub fn pack(score: f32, expert: u32) -> Self {
        PackedScoreIndex(score.pack(expert))
    }

    pub fn unpack(self) -> (f32, u32) {
        f32::unpack(self.0)
    }
}

/// Token/expert block sizes for the IO-aware kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouteBlocks {
    pub block_n: usize,
    pub block_m: usize,
}

impl Default for RouteBlocks {
    fn default() -> Self {
        RouteBlocks { block_n: 64, block_m: 64 }
    }
}

/// Tile edge of the naive router's output-stationary GEMM.
pub const NAIVE_GEMM_TILE: usize = 64;

fn check_route_inputs<T: Scalar>(x: &Tensor<T>, params: &RouterParams<T>, k: usize) -> Result<(usize, usize, usize, usize, usize)> {
    params.validate()?;
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("router input must be [B, T, N_h, d_h], got {s:?}")));
    }
    let (b, t, nh, dh) = (s[0], s[1], s[2], s[3]);
    if nh != params.n_heads() || dh != params.d_h() {
        return Err(Error::Shape(format!(
            "router input {s:?} does not match weights {:?}",
            params.w_r.shape()
        )));
    }
    let ne = params.n_experts();
    if k == 0 || k > ne {
        return Err(Error::InvalidParameter(format!("k = {k} must be in 1..={ne}")));
    }
    Ok((b, t, nh, dh, ne))
}

/// Gathers rows `x[b, t0..t1, h, :]` into a contiguous `[n, d_h]` buffer.
fn gather_rows<T: Scalar>(x: &[T], b: usize, t0: usize, t1: usize, h: usize, t: usize, nh: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity((t1 - t0) * dh);
    for ti in t0..t1 {
        let base = ((b * t + ti) * nh + h) * dh;
        out.extend_from_slice(&x[base..base + dh]);
    }
    out
}

/// Gathers `W_r[h, :, e0..e1]` as `[d_h, m]`.
fn gather_weight_block<T: Scalar>(w: &[T], h: usize, dh: usize, ne: usize, e0: usize, e1: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(dh * (e1 - e0));
    for j in 0..dh {
        let base = (h * dh + j) * ne;
        out.extend_from_slice(&w[base + e0..base + e1]);
    }
    out
}

/// `S = X·W + b` for one tile. Shared by both forward kernels so their
/// scores agree bitwise.
fn score_tile<T: Scalar>(x: &[T], n: usize, dh: usize, w: &[T], m: usize, bias: &[T], out: &mut [T]) {
    matmul_into(x, w, out, n, dh, m);
    for row in out.chunks_mut(m) {
        for (s, &b) in row.iter_mut().zip(bias) {
            *s += b;
        }
    }
}

fn check_nan<T: Scalar>(s: &[T], m: usize, e0: usize, row0: usize, h: usize) -> Result<()> {
    if let Some(pos) = s.iter().position(|v| v.is_nan()) {
        return Err(Error::NanScore { token: row0 + pos / m, head: h, expert: e0 + pos % m });
    }
    Ok(())
}

/// Top-`k` of one score row by packed word: descending score, ties to the
/// lower expert id.
pub fn select_topk<T: Scalar>(row: &[T], k: usize) -> Vec<(T, u32)> {
    let mut packed: Vec<T::Packed> = row.iter().enumerate().map(|(e, &s)| s.pack(e as u32)).collect();
    packed.sort_unstable_by(|a, b| b.cmp(a));
    packed.into_iter().take(k).map(T::unpack).collect()
}

/// Dense reference router: a tiled GEMM writes the full biased score tensor
/// to HBM, then a selection kernel reads it back row by row.
pub fn route_naive<T: Scalar>(
    x: &Tensor<T>,
    params: &RouterParams<T>,
    k: usize,
    arena: &mut Arena,
) -> Result<TopKResult<T>> {
    let (b, t, nh, dh, ne) = check_route_inputs(x, params, k)?;
    let xs = x.data();
    let w = params.w_r.data();
    let bias = params.bias.data();
    let scores_buf = arena.hbm_alloc(b * t * nh * ne);
    let mut s_hbm = vec![T::zero(); b * t * nh * ne];

    let tn = NAIVE_GEMM_TILE.min(t);
    let tm = NAIVE_GEMM_TILE.min(ne);
    for bi in 0..b {
        for h in 0..nh {
            for t0 in (0..t).step_by(tn) {
                let t1 = (t0 + tn).min(t);
                let n = t1 - t0;
                for e0 in (0..ne).step_by(tm) {
                    let e1 = (e0 + tm).min(ne);
                    let m = e1 - e0;
                    let (hx, xt) = arena.load_tile("x_tile", &gather_rows(xs, bi, t0, t1, h, t, nh, dh))?;
                    let (hw, wt) = arena.load_tile("w_tile", &gather_weight_block(w, h, dh, ne, e0, e1))?;
                    let (hb, bt) = arena.load_tile("b_tile", &bias[h * ne + e0..h * ne + e1])?;
                    let hs = arena.scratch("s_tile", n * m)?;
                    let mut st = vec![T::zero(); n * m];
                    score_tile(&xt, n, dh, &wt, m, &bt, &mut st);
                    arena.add_flops((2 * n * m * dh) as u64);
                    check_nan(&st, m, e0, bi * t + t0, h)?;
                    arena.store_intermediate_words(hs, n * m)?;
                    for r in 0..n {
                        let dst = ((bi * t + t0 + r) * nh + h) * ne + e0;
                        s_hbm[dst..dst + m].copy_from_slice(&st[r * m..(r + 1) * m]);
                    }
                    for hd in [hx, hw, hb, hs] {
                        arena.free(hd)?;
                    }
                }
            }
        }
    }

    let mut scores = Tensor::zeros(&[b, t, nh, k]);
    let mut indices = Tensor::zeros(&[b, t, nh, k]);
    for row in 0..b * t * nh {
        let h = row % nh;
        let hr = arena.load_intermediate_words("s_row", ne)?;
        let hp = arena.scratch("packed_row", ne * T::PACKED_WORDS)?;
        let top = select_topk(&s_hbm[row * ne..(row + 1) * ne], k);
        let hg = arena.load_words("bias_gather", k)?;
        let ho = arena.scratch("out_row", 2 * k)?;
        for (j, &(s, e)) in top.iter().enumerate() {
            scores.data_mut()[row * k + j] = s - bias[h * ne + e as usize];
            indices.data_mut()[row * k + j] = e;
        }
        arena.store_words(ho, 2 * k)?;
        for hd in [hr, hp, hg, ho] {
            arena.free(hd)?;
        }
    }
    arena.hbm_free(scores_buf);
    Ok(TopKResult { scores, indices })
}

/// IO-aware forward routing.
pub fn route_ioaware_fwd<T: Scalar>(
    x: &Tensor<T>,
    params: &RouterParams<T>,
    k: usize,
    blocks: RouteBlocks,
    arena: &mut Arena,
) -> Result<TopKResult<T>> {
    let ne = params.n_experts();
    let n_blocks = ne.div_ceil(blocks.block_m.max(1));
    let order: Vec<usize> = (0..n_blocks).collect();
    route_ioaware_fwd_ordered(x, params, k, blocks, &order, arena)
}

/// [`route_ioaware_fwd`] with an explicit visiting order of expert blocks.
/// Any permutation selects the same experts because the packed order is
/// total.
pub fn route_ioaware_fwd_ordered<T: Scalar>(
    x: &Tensor<T>,
    params: &RouterParams<T>,
    k: usize,
    blocks: RouteBlocks,
    block_order: &[usize],
    arena: &mut Arena,
) -> Result<TopKResult<T>> {
    let (b, t, nh, dh, ne) = check_route_inputs(x, params, k)?;
    if blocks.block_n == 0 || blocks.block_m == 0 {
        return Err(Error::InvalidParameter("block sizes must be >= 1".into()));
    }
    let bn = blocks.block_n.min(t);
    let bm = blocks.block_m.min(ne);
    let n_eblocks = ne.div_ceil(bm);
    {
        let mut seen = vec![false; n_eblocks];
        for &eb in block_order {
            if eb >= n_eblocks || std::mem::replace(&mut seen[eb], true) {
                return Err(Error::InvalidParameter(format!("bad expert block order {block_order:?}")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidParameter(format!("bad expert block order {block_order:?}")));
        }
    }
    let xs = x.data();
    let w = params.w_r.data();
    let bias = params.bias.data();
    let mut scores = Tensor::zeros(&[b, t, nh, k]);
    let mut indices = Tensor::zeros(&[b, t, nh, k]);

    let mut merged: Vec<T::Packed> = Vec::with_capacity(2 * k);
    let mut cand: Vec<T::Packed> = Vec::with_capacity(bm);
    for bi in 0..b {
        for t0 in (0..t).step_by(bn) {
            let t1 = (t0 + bn).min(t);
            let n = t1 - t0;
            for h in 0..nh {
                let (hx, xt) = arena.load_tile("x_block", &gather_rows(xs, bi, t0, t1, h, t, nh, dh))?;
                let hacc = arena.scratch("topk_acc", n * k * T::PACKED_WORDS)?;
                let mut acc: Vec<T::Packed> = vec![T::Packed::default(); n * k];

                for &eb in block_order {
                    let e0 = eb * bm;
                    let e1 = (e0 + bm).min(ne);
                    let m = e1 - e0;
                    let (hw, wt) = arena.load_tile("w_block", &gather_weight_block(w, h, dh, ne, e0, e1))?;
                    let (hb, bt) = arena.load_tile("b_block", &bias[h * ne + e0..h * ne + e1])?;
                    let hs = arena.scratch("s_block", n * m)?;
                    let hc = arena.scratch("local_topk", n * k.min(m) * T::PACKED_WORDS)?;
                    let mut st = vec![T::zero(); n * m];
                    score_tile(&xt, n, dh, &wt, m, &bt, &mut st);
                    arena.add_flops((2 * n * m * dh) as u64);
                    check_nan(&st, m, e0, bi * t + t0, h)?;

                    for r in 0..n {
                        cand.clear();
                        cand.extend(st[r * m..(r + 1) * m].iter().enumerate().map(|(j, &s)| s.pack((e0 + j) as u32)));
                        cand.sort_unstable_by(|a, b| b.cmp(a));
                        cand.truncate(k);
                        let row = &mut acc[r * k..(r + 1) * k];
                        merged.clear();
                        merged.extend_from_slice(row);
                        merged.extend_from_slice(&cand);
                        merged.sort_unstable_by(|a, b| b.cmp(a));
                        row.copy_from_slice(&merged[..k]);
                    }
                    for hd in [hw, hb, hs, hc] {
                        arena.free(hd)?;
                    }
                }

                let hg = arena.load_words("bias_gather", n * k)?;
                let ho = arena.scratch("out_block", 2 * n * k)?;
                for r in 0..n {
                    let dst = ((bi * t + t0 + r) * nh + h) * k;
                    for j in 0..k {
                        let (s, e) = T::unpack(acc[r * k + j]);
                        scores.data_mut()[dst + j] = s - bias[h * ne + e as usize];
                        indices.data_mut()[dst + j] = e;
                    }
                }
                arena.store_words(ho, n * k)?;
                arena.store_words(ho, n * k)?;
                for hd in [hx, hacc, hg, ho] {
                    arena.free(hd)?;
                }
            }
        }
    }
    Ok(TopKResult { scores, indices })
}

/// Sparse routing backward. Returns `(dx [B,T,N_h,d_h], dw_r [N_h,d_h,N_e])`.
/// Only the selected columns of `dw_r` receive gradient; the bias receives
/// none.
pub fn route_ioaware_bwd<T: Scalar>(
    x: &Tensor<T>,
    params: &RouterParams<T>,
    topk: &TopKResult<T>,
    d_scores: &Tensor<T>,
    block_n: usize,
    arena: &mut Arena,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let k = topk.k();
    let (b, t, nh, dh, ne) = check_route_inputs(x, params, k)?;
    if topk.indices.shape() != [b, t, nh, k] || d_scores.shape() != topk.indices.shape() {
        return Err(Error::Shape(format!(
            "backward: indices {:?} / d_scores {:?} do not match input {:?}",
            topk.indices.shape(),
            d_scores.shape(),
            x.shape()
        )));
    }
    if let Some(&bad) = topk.indices.data().iter().find(|&&e| e as usize >= ne) {
        return Err(Error::IndexOutOfRange { index: bad as usize, bound: ne });
    }
    if block_n == 0 {
        return Err(Error::InvalidParameter("block_n must be >= 1".into()));
    }
    let bn = block_n.min(t);
    let xs = x.data();
    let w = params.w_r.data();
    let idx = topk.indices.data();
    let ds = d_scores.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(params.w_r.shape());

    for bi in 0..b {
        for t0 in (0..t).step_by(bn) {
            let t1 = (t0 + bn).min(t);
            let n = t1 - t0;
            for h in 0..nh {
                let (hx, xt) = arena.load_tile("x_block", &gather_rows(xs, bi, t0, t1, h, t, nh, dh))?;
                let hdx = arena.scratch("dx_accum", n * dh)?;
                let mut dx_acc = vec![T::zero(); n * dh];
                for i in 0..k {
                    let pos = |r: usize| ((bi * t + t0 + r) * nh + h) * k + i;
                    let he = arena.load_words("e_i", n)?;
                    let hds = arena.load_words("ds_i", n)?;
                    let hw = arena.load_words("w_gather", n * dh)?;
                    let hxd = arena.scratch("x_ds", n * dh)?;
                    let mut contrib = vec![T::zero(); n * dh];
                    let mut offsets = Vec::with_capacity(n * dh);
                    for r in 0..n {
                        let e = idx[pos(r)] as usize;
                        let g = ds[pos(r)];
                        for j in 0..dh {
                            let wv = w[(h * dh + j) * ne + e];
                            dx_acc[r * dh + j] += g * wv;
                            contrib[r * dh + j] = xt[r * dh + j] * g;
                            offsets.push((h * dh + j) * ne + e);
                        }
                    }
                    arena.add_flops((4 * n * dh) as u64);
                    arena.atomic_scatter_add(hxd, &contrib, dw.data_mut(), &offsets)?;
                    for hd in [he, hds, hw, hxd] {
                        arena.free(hd)?;
                    }
                }
                arena.store_words(hdx, n * dh)?;
                for r in 0..n {
                    let dst = ((bi * t + t0 + r) * nh + h) * dh;
                    dx.data_mut()[dst..dst + dh].copy_from_slice(&dx_acc[r * dh..(r + 1) * dh]);
                }
                arena.free(hx)?;
                arena.free(hdx)?;
            }
        }
    }
    Ok((dx, dw))
}

/// Softmax over the `k` selected unbiased scores of every `(b, t, h)`.
pub fn gate_from_scores<T: Scalar>(topk: &TopKResult<T>) -> Tensor<T> {
    let k = topk.k();
    let mut gates = topk.scores.clone();
    for row in gates.data_mut().chunks_mut(k) {
        softmax_in_place(row);
    }
    gates
}

/// Vector-Jacobian product of [`gate_from_scores`]:
/// `ds = g ⊙ (dg − Σ g·dg)` per row.
pub fn gate_backward<T: Scalar>(gates: &Tensor<T>, d_gates: &Tensor<T>, k: usize) -> Tensor<T> {
    let mut ds = Tensor::zeros(gates.shape());
    for ((g, dg), out) in gates.data().chunks(k).zip(d_gates.data().chunks(k)).zip(ds.data_mut().chunks_mut(k)) {
        let inner: T = g.iter().zip(dg).map(|(&a, &b)| a * b).sum();
        for j in 0..k {
            out[j] = g[j] * (dg[j] - inner);
        }
    }
    ds
}

/// Global per-expert token counts for one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadBalanceState {
    pub n_heads: usize,
    pub n_experts: usize,
    /// `[N_h × N_e]` row-major.
    pub expert_load: Vec<u64>,
    pub update_rate: f64,
}

pub const DEFAULT_BALANCE_RATE: f64 = 1e-3;

impl LoadBalanceState {
    pub fn new(n_heads: usize, n_experts: usize, update_rate: f64) -> Self {
        LoadBalanceState { n_heads, n_experts, expert_load: vec![0; n_heads * n_experts], update_rate }
    }

    /// Adds the selections of one (micro-)batch.
    pub fn tally<T: Scalar>(&mut self, topk: &TopKResult<T>) -> Result<()> {
        let (_, _, nh, k) = topk.dims();
        if nh != self.n_heads {
            return Err(Error::Shape(format!("tally: {nh} heads, state has {}", self.n_heads)));
        }
        for (i, &e) in topk.indices.data().iter().enumerate() {
            let h = (i / k) % nh;
            if e as usize >= self.n_experts {
                return Err(Error::IndexOutOfRange { index: e as usize, bound: self.n_experts });
            }
            self.expert_load[h * self.n_experts + e as usize] += 1;
        }
        Ok(())
    }

    /// Adds selections of a single head into head slot `h`.
    pub fn tally_head(&mut self, h: usize, indices: &[u32]) {
        for &e in indices {
            self.expert_load[h * self.n_experts + e as usize] += 1;
        }
    }

    pub fn head_load(&self, h: usize) -> &[u64] {
        &self.expert_load[h * self.n_experts..(h + 1) * self.n_experts]
    }

    /// max / mean expert load, worst head.
    pub fn imbalance(&self) -> f64 {
        (0..self.n_heads)
            .map(|h| {
                let load = self.head_load(h);
                let total: u64 = load.iter().sum();
                if total == 0 {
                    return 1.0;
                }
                let mean = total as f64 / self.n_experts as f64;
                *load.iter().max().unwrap() as f64 / mean
            })
            .fold(0.0, f64::max)
    }

    pub fn reset(&mut self) {
        self.expert_load.iter_mut().for_each(|v| *v = 0);
    }
}

/// Aux-free balancing: `bias[e] −= γ·sign(load[e] − mean_load)` per head.
pub fn update_balance_bias<T: Scalar>(state: &LoadBalanceState, params: &mut RouterParams<T>) -> Result<()> {
    if params.n_heads() != state.n_heads || params.n_experts() != state.n_experts {
        return Err(Error::Shape("balance state does not match router".into()));
    }
    let ne = state.n_experts;
    for h in 0..state.n_heads {
        let load = state.head_load(h);
        let mean = load.iter().sum::<u64>() as f64 / ne as f64;
        for (e, &l) in load.iter().enumerate() {
            let diff = l as f64 - mean;
            let step = if diff > 0.0 {
                state.update_rate
            } else if diff < 0.0 {
                -state.update_rate
            } else {
                0.0
            };
            params.bias.data_mut()[h * ne + e] -= T::from_f64(step);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{Arena, TierConfig};
    use crate::tensor::rel_err;

    fn instance(seed: u64, b: usize, t: usize, nh: usize, dh: usize, ne: usize) -> (Tensor<f32>, RouterParams<f32>) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor(&[b, t, nh, dh], 1.0);
        let mut p = RouterParams::init(&mut rng, nh, dh, ne, 0.5);
        p.bias = rng.normal_tensor(&[nh, ne], 0.1);
        (x, p)
    }

    /// Exhaustive oracle: sort all experts by (biased score desc, id asc).
    fn oracle(x: &Tensor<f32>, p: &RouterParams<f32>, k: usize) -> (Vec<u32>, Vec<f32>) {
        let s = x.shape();
        let (b, t, nh, dh) = (s[0], s[1], s[2], s[3]);
        let ne = p.n_experts();
        let (mut idx, mut sc) = (Vec::new(), Vec::new());
        for row in 0..b * t * nh {
            let h = row % nh;
            let xr = &x.data()[row * dh..(row + 1) * dh];
            let mut all: Vec<(f32, f32, u32)> = (0..ne)
                .map(|e| {
                    let mut acc = 0.0f32;
                    for j in 0..dh {
                        acc += xr[j] * p.w_r.data()[(h * dh + j) * ne + e];
                    }
                    let bias = p.bias.data()[h * ne + e];
                    (acc + bias, bias, e as u32)
                })
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
            for &(biased, bias, e) in &all[..k] {
                idx.push(e);
                sc.push(biased - bias);
            }
        }
        (idx, sc)
    }

    #[test]
    fn naive_matches_full_sort_oracle() {
        let (x, p) = instance(1, 2, 16, 2, 8, 32);
        let r = route_naive(&x, &p, 4, &mut Arena::unbounded("naive")).unwrap();
        let (idx, sc) = oracle(&x, &p, 4);
        assert_eq!(r.indices.data(), &idx[..]);
        assert!(rel_err(r.scores.data(), &sc) <= 1e-6);
        r.validate(32).unwrap();
    }

    #[test]
    fn degenerate_k_equals_ne() {
        let (x, mut p) = instance(2, 1, 5, 1, 4, 6);
        p.bias = Tensor::zeros(&[1, 6]);
        let r = route_naive(&x, &p, 6, &mut Arena::unbounded("n")).unwrap();
        for row in 0..5 {
            let mut ids: Vec<u32> = r.indices.data()[row * 6..(row + 1) * 6].to_vec();
            let sc = &r.scores.data()[row * 6..(row + 1) * 6];
            assert!(sc.windows(2).all(|w| w[0] >= w[1]));
            ids.sort();
            assert_eq!(ids, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn ties_go_to_lower_index() {
        let (x, mut p) = instance(3, 1, 4, 1, 4, 4);
        // Experts 1 and 3 share weights; zero bias.
        for j in 0..4 {
            let v = p.w_r.data()[j * 4 + 1];
            p.w_r.data_mut()[j * 4 + 3] = v;
        }
        p.bias = Tensor::zeros(&[1, 4]);
        let r = route_ioaware_fwd(&x, &p, 4, RouteBlocks { block_n: 2, block_m: 1 }, &mut Arena::unbounded("t")).unwrap();
        for row in r.indices.data().chunks(4) {
            let p1 = row.iter().position(|&e| e == 1).unwrap();
            let p3 = row.iter().position(|&e| e == 3).unwrap();
            assert!(p1 < p3);
        }
    }

    #[test]
    fn ioaware_equals_naive_across_blocks() {
        for seed in 0..5 {
            let (x, p) = instance(10 + seed, 2, 33, 3, 8, 40);
            let k = 4;
            let naive = route_naive(&x, &p, k, &mut Arena::unbounded("n")).unwrap();
            for &(bn, bm) in &[(1, 1), (4, k), (16, 16), (64, 64), (7, 40)] {
                let r = route_ioaware_fwd(&x, &p, k, RouteBlocks { block_n: bn, block_m: bm }, &mut Arena::new(TierConfig::default(), "io")).unwrap();
                assert_eq!(r.indices, naive.indices, "bn={bn} bm={bm}");
                assert!(rel_err(r.scores.data(), naive.scores.data()) <= 1e-6);
            }
        }
    }

    #[test]
    fn bias_steers_selection_but_not_scores() {
        let (x, mut p) = instance(4, 1, 20, 1, 8, 16);
        p.bias = Tensor::zeros(&[1, 16]);
        p.bias.data_mut()[7] = 100.0;
        let r = route_ioaware_fwd(&x, &p, 2, RouteBlocks { block_n: 8, block_m: 4 }, &mut Arena::unbounded("b")).unwrap();
        for row in 0..20 {
            assert_eq!(r.indices.data()[row * 2], 7);
            let xr = &x.data()[row * 8..(row + 1) * 8];
            let raw: f32 = (0..8).map(|j| xr[j] * p.w_r.data()[j * 16 + 7]).sum();
            assert!((r.scores.data()[row * 2] - raw).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_bad_k_and_nan() {
        let (x, mut p) = instance(5, 1, 3, 1, 4, 4);
        assert!(matches!(route_naive(&x, &p, 5, &mut Arena::unbounded("n")), Err(Error::InvalidParameter(_))));
        assert!(route_ioaware_fwd(&x, &p, 0, RouteBlocks::default(), &mut Arena::unbounded("n")).is_err());
        p.w_r.data_mut()[2] = f32::NAN;
        assert!(matches!(
            route_ioaware_fwd(&x, &p, 2, RouteBlocks::default(), &mut Arena::unbounded("n")),
            Err(Error::NanScore { .. })
        ));
        assert!(matches!(route_naive(&x, &p, 2, &mut Arena::unbounded("n")), Err(Error::NanScore { .. })));
    }

    #[test]
    fn sram_overflow_propagates() {
        let (x, p) = instance(6, 1, 64, 1, 64, 64);
        let mut arena = Arena::new(TierConfig::with_capacity(1000).unwrap(), "small");
        assert!(matches!(
            route_ioaware_fwd(&x, &p, 2, RouteBlocks { block_n: 64, block_m: 64 }, &mut arena),
            Err(Error::SramOverflow { .. })
        ));
    }

    #[test]
    fn block_order_does_not_change_selection() {
        let (x, mut p) = instance(7, 1, 12, 2, 4, 12);
        // Introduce exact ties across blocks.
        for h in 0..2 {
            for j in 0..4 {
                let v = p.w_r.data()[(h * 4 + j) * 12];
                p.w_r.data_mut()[(h * 4 + j) * 12 + 9] = v;
            }
            let b0 = p.bias.data()[h * 12];
            p.bias.data_mut()[h * 12 + 9] = b0;
        }
        let blocks = RouteBlocks { block_n: 5, block_m: 3 };
        let fwd = route_ioaware_fwd_ordered(&x, &p, 3, blocks, &[0, 1, 2, 3], &mut Arena::unbounded("a")).unwrap();
        let rev = route_ioaware_fwd_ordered(&x, &p, 3, blocks, &[3, 2, 1, 0], &mut Arena::unbounded("a")).unwrap();
        let mix = route_ioaware_fwd_ordered(&x, &p, 3, blocks, &[2, 0, 3, 1], &mut Arena::unbounded("a")).unwrap();
        assert_eq!(fwd.indices, rev.indices);
        assert_eq!(fwd.indices, mix.indices);
        assert!(route_ioaware_fwd_ordered(&x, &p, 3, blocks, &[0, 1, 1, 3], &mut Arena::unbounded("a")).is_err());
    }

    #[test]
    fn output_writes_match_output_shape() {
        let (x, p) = instance(8, 2, 10, 3, 4, 8);
        let mut arena = Arena::new(TierConfig::default(), "io");
        route_ioaware_fwd(&x, &p, 3, RouteBlocks { block_n: 4, block_m: 4 }, &mut arena).unwrap();
        assert_eq!(arena.ledger().hbm_words_written, 2 * 2 * 10 * 3 * 3);
        assert_eq!(arena.ledger().intermediate_words_written, 0);
        assert_eq!(arena.live_tile_count(), 0);
    }

    #[test]
    fn zero_cotangent_gives_zero_grads() {
        let (x, p) = instance(9, 1, 6, 2, 4, 8);
        let r = route_ioaware_fwd(&x, &p, 2, RouteBlocks::default(), &mut Arena::unbounded("f")).unwrap();
        let ds = Tensor::zeros(r.scores.shape());
        let (dx, dw) = route_ioaware_bwd(&x, &p, &r, &ds, 4, &mut Arena::unbounded("b")).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_bad_indices() {
        let (x, p) = instance(9, 1, 6, 2, 4, 8);
        let mut r = route_naive(&x, &p, 2, &mut Arena::unbounded("f")).unwrap();
        r.indices.data_mut()[0] = 8;
        let ds = Tensor::zeros(r.scores.shape());
        assert!(matches!(
            route_ioaware_bwd(&x, &p, &r, &ds, 4, &mut Arena::unbounded("b")),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn gates_sum_to_one_and_match_masked_softmax() {
        let (x, p) = instance(11, 1, 9, 2, 6, 10);
        let r = route_naive(&x, &p, 3, &mut Arena::unbounded("n")).unwrap();
        let g = gate_from_scores(&r);
        for row in 0..9 * 2 {
            let gs = &g.data()[row * 3..(row + 1) * 3];
            assert!((gs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            // Literal masked softmax over all experts.
            let mut dense = [f64::NEG_INFINITY; 10];
            for j in 0..3 {
                dense[r.indices.data()[row * 3 + j] as usize] = r.scores.data()[row * 3 + j] as f64;
            }
            let max = dense.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = dense.iter().map(|v| (v - max).exp()).sum();
            for j in 0..3 {
                let e = r.indices.data()[row * 3 + j] as usize;
                assert!(((dense[e] - max).exp() / z - gs[j] as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gate_edge_cases() {
        let r = TopKResult {
            scores: Tensor::from_vec(&[1, 2, 1, 2], vec![0.3f32, 0.3, 1.0, -1.0]).unwrap(),
            indices: Tensor::from_vec(&[1, 2, 1, 2], vec![0u32, 1, 0, 1]).unwrap(),
        };
        let g = gate_from_scores(&r);
        assert_eq!(&g.data()[..2], &[0.5, 0.5]);
        let r1 = TopKResult {
            scores: Tensor::from_vec(&[1, 1, 1, 1], vec![-3.7f32]).unwrap(),
            indices: Tensor::from_vec(&[1, 1, 1, 1], vec![2u32]).unwrap(),
        };
        assert_eq!(gate_from_scores(&r1).data(), &[1.0]);
    }

    #[test]
    fn balance_sign_rule() {
        let mut p = RouterParams::<f32>::init(&mut Rng::new(0), 1, 2, 4, 0.02);
        let mut state = LoadBalanceState::new(1, 4, 0.25);
        state.expert_load = vec![3, 3, 3, 3];
        update_balance_bias(&state, &mut p).unwrap();
        assert_eq!(p.bias.data(), &[0.0; 4]);
        state.expert_load = vec![9, 1, 1, 1];
        update_balance_bias(&state, &mut p).unwrap();
        assert_eq!(p.bias.data(), &[-0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn tally_totals() {
        let (x, p) = instance(12, 2, 7, 3, 4, 9);
        let r = route_naive(&x, &p, 2, &mut Arena::unbounded("n")).unwrap();
        let mut s = LoadBalanceState::new(3, 9, DEFAULT_BALANCE_RATE);
        s.tally(&r).unwrap();
        for h in 0..3 {
            assert_eq!(s.head_load(h).iter().sum::<u64>(), 2 * 7 * 2);
        }
    }

    proptest::proptest! {
        #[test]
        fn selection_invariant_to_constant_shift(
            grid in proptest::collection::vec(-800i32..800, 1..40),
            shift in -800i32..800,
            k_frac in 0.0f64..1.0,
        ) {
            // Scores on a 1/8 grid keep the shifted values exact in FP32.
            let row: Vec<f32> = grid.iter().map(|&g| g as f32 / 8.0).collect();
            let c = shift as f32 / 8.0;
            let shifted: Vec<f32> = row.iter().map(|v| v + c).collect();
            let k = 1 + ((row.len() - 1) as f64 * k_frac) as usize;
            let a: Vec<u32> = select_topk(&row, k).into_iter().map(|(_, e)| e).collect();
            let b: Vec<u32> = select_topk(&shifted, k).into_iter().map(|(_, e)| e).collect();
            proptest::prop_assert_eq!(a, b);
        }
    }
}
