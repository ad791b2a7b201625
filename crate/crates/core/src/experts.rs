//! Dropless expert computation.
//!
//! Token replicas are first clustered by expert ([`ClusterPlan`]). Two
//! backends then evaluate `gelu(X·W_inᵀ)·W_out` per expert segment:
//!
//! * [`experts_naive`]: grouped GEMM that writes the hidden activations
//!   `[R, d_e]` to HBM between the two projections.
//! * [`experts_blocksparse`]: the same computation phrased as block-sparse
//!   attention with `Q = X`, `K = W_in`, `V = W_out` and the score
//!   modifier `log(gelu(s) + 1)`. A streaming softmax returns `O'` and
//!   `log ℓ`; since `O'·ℓ = gelu(XKᵀ)V + Σ_j V_j`, subtracting the per-expert
//!   value row sum recovers the exact output without ever materializing the
//!   hidden activations.

use std::io::Write;

use crate::error::{Error, Result};
use crate::memory::Arena;
use crate::rng::Rng;
use crate::tensor::{gelu_grad_scalar, gelu_scalar, matmul_into, matmul_nt_into, Scalar, Tensor};

/// Per-expert weights. Both banks are `[N_e, d_e, d_h]`; expert `e` computes
/// `gelu(x·w_in[e]ᵀ)·w_out[e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank<T = f32> {
    pub w_in: Tensor<T>,
    pub w_out: Tensor<T>,
}

impl<T: Scalar> ExpertBank<T> {
    pub fn new(w_in: Tensor<T>, w_out: Tensor<T>) -> Result<Self> {
        if w_in.ndim() != 3 || w_in.shape() != w_out.shape() {
            return Err(Error::Shape(format!(
                "expert banks must both be [N_e, d_e, d_h]: {:?} vs {:?}",
                w_in.shape(),
                w_out.shape()
            )));
        }
        Ok(ExpertBank { w_in, w_out })
    }

    pub fn init(rng: &mut Rng, n_experts: usize, d_e: usize, d_h: usize, std: f64) -> Self {
        ExpertBank {
            w_in: rng.normal_tensor(&[n_experts, d_e, d_h], std),
            w_out: rng.normal_tensor(&[n_experts, d_e, d_h], std),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn d_e(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn d_h(&self) -> usize {
        self.w_in.shape()[2]
    }

    pub fn cast<U: Scalar>(&self) -> ExpertBank<U> {
        ExpertBank { w_in: self.w_in.cast(), w_out: self.w_out.cast() }
    }

    /// `Σ_j w_out[e][j]` for every expert, `[N_e, d_h]`.
    pub fn value_row_sums(&self) -> Vec<T> {
        let (ne, de, dh) = (self.n_experts(), self.d_e(), self.d_h());
        let mut out = vec![T::zero(); ne * dh];
        for e in 0..ne {
            for j in 0..de {
                let row = &self.w_out.data()[(e * de + j) * dh..(e * de + j + 1) * dh];
                for (o, &v) in out[e * dh..(e + 1) * dh].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out
    }
}

/// Stable clustering of the `n·k` token replicas by expert id. Replica
/// `r = t·k + j` is the `j`-th selection of token `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterPlan {
    /// Clustered position → replica id.
    pub permutation: Vec<usize>,
    /// Replica id → clustered position.
    pub inverse_permutation: Vec<usize>,
    /// Segment `e` is `expert_offsets[e]..expert_offsets[e + 1]`.
    pub expert_offsets: Vec<usize>,
    pub k: usize,
}

impl ClusterPlan {
    pub fn n_replicas(&self) -> usize {
        self.permutation.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.permutation.len() / self.k.max(1)
    }

    pub fn n_experts(&self) -> usize {
        self.expert_offsets.len() - 1
    }

    pub fn segment(&self, e: usize) -> std::ops::Range<usize> {
        self.expert_offsets[e]..self.expert_offsets[e + 1]
    }

    pub fn segment_len(&self, e: usize) -> usize {
        self.expert_offsets[e + 1] - self.expert_offsets[e]
    }

    /// Expert owning clustered position `p`.
    pub fn expert_of(&self, p: usize) -> usize {
        // Last offset <= p among non-empty segments.
        self.expert_offsets.partition_point(|&o| o <= p) - 1
    }

    /// Expert id per clustered position.
    pub fn position_experts(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_replicas());
        for e in 0..self.n_experts() {
            out.extend(std::iter::repeat_n(e, self.segment_len(e)));
        }
        out
    }

    /// Gathers `x[n, d]` into clustered replica rows `[n·k, d]`.
    pub fn permute_tokens<T: Scalar>(&self, x: &[T], d: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_replicas() * d);
        for &r in &self.permutation {
            let t = r / self.k;
            out.extend_from_slice(&x[t * d..(t + 1) * d]);
        }
        out
    }

    /// Reorders replica-ordered rows into clustered order.
    pub fn permute_rows<T: Copy>(&self, rows: &[T], d: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(rows.len());
        for &r in &self.permutation {
            out.extend_from_slice(&rows[r * d..(r + 1) * d]);
        }
        out
    }

    /// Inverse of [`ClusterPlan::permute_rows`].
    pub fn unpermute_rows<T: Copy>(&self, clustered: &[T], d: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(clustered.len());
        for &p in &self.inverse_permutation {
            out.extend_from_slice(&clustered[p * d..(p + 1) * d]);
        }
        out
    }

    /// Debug dump: `permutation` as little-endian `u32`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for &p in &self.permutation {
            out.write_all(&(p as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.permutation.len();
        if self.inverse_permutation.len() != n || *self.expert_offsets.last().unwrap_or(&0) != n {
            return Err(Error::Plan("length mismatch".into()));
        }
        if self.expert_offsets.windows(2).any(|w| w[0] > w[1]) || self.expert_offsets[0] != 0 {
            return Err(Error::Plan("offsets not non-decreasing from 0".into()));
        }
        for (p, &r) in self.permutation.iter().enumerate() {
            if r >= n || self.inverse_permutation[r] != p {
                return Err(Error::Plan(format!("permutation breaks at position {p}")));
            }
        }
        Ok(())
    }
}

/// Counting sort of replicas by expert, stable in `(token, slot)` order.
pub fn build_cluster_plan(indices: &[u32], k: usize, n_experts: usize) -> Result<ClusterPlan> {
    if k == 0 || !indices.len().is_multiple_of(k) {
        return Err(Error::Shape(format!("{} indices not divisible by k = {k}", indices.len())));
    }
    let mut counts = vec![0usize; n_experts + 1];
    for &e in indices {
        if e as usize >= n_experts {
            return Err(Error::IndexOutOfRange { index: e as usize, bound: n_experts });
        }
        counts[e as usize + 1] += 1;
    }
    for e in 0..n_experts {
        counts[e + 1] += counts[e];
    }
    let expert_offsets = counts.clone();
    let mut cursor = counts;
    let mut permutation = vec![0usize; indices.len()];
    let mut inverse_permutation = vec![0usize; indices.len()];
    for (r, &e) in indices.iter().enumerate() {
        let p = cursor[e as usize];
        cursor[e as usize] += 1;
        permutation[p] = r;
        inverse_permutation[r] = p;
    }
    Ok(ClusterPlan { permutation, inverse_permutation, expert_offsets, k })
}

/// Occupancy of (token block × key block) tiles for the block-sparse form.
/// Keys are the `N_e·d_e` rows of the stacked `W_in`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    pub row_block: usize,
    pub col_block: usize,
    pub n_row_blocks: usize,
    pub n_col_blocks: usize,
    occupied: Vec<bool>,
}

impl BlockMask {
    pub fn from_plan(plan: &ClusterPlan, d_e: usize, row_block: usize, col_block: usize) -> Result<Self> {
        if row_block == 0 || col_block == 0 || d_e == 0 {
            return Err(Error::InvalidParameter("block sizes and d_e must be >= 1".into()));
        }
        let n_rows = plan.n_replicas();
        let n_keys = plan.n_experts() * d_e;
        let n_row_blocks = n_rows.div_ceil(row_block);
        let n_col_blocks = n_keys.div_ceil(col_block);
        let mut occupied = vec![false; n_row_blocks * n_col_blocks];
        let experts = plan.position_experts();
        for (p, &e) in experts.iter().enumerate() {
            let rb = p / row_block;
            let (k0, k1) = (e * d_e, (e + 1) * d_e);
            for cb in k0 / col_block..=(k1 - 1) / col_block {
                occupied[rb * n_col_blocks + cb] = true;
            }
        }
        Ok(BlockMask { row_block, col_block, n_row_blocks, n_col_blocks, occupied })
    }

    pub fn is_occupied(&self, rb: usize, cb: usize) -> bool {
        self.occupied[rb * self.n_col_blocks + cb]
    }

    pub fn occupied_cols(&self, rb: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_col_blocks).filter(move |&cb| self.is_occupied(rb, cb))
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }
}

/// Tile sizes for the expert kernels: `row_block` replicas by `col_block`
/// expert-hidden units (grouped GEMM) or key rows (block-sparse).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertTiles {
    pub row_block: usize,
    pub col_block: usize,
}

impl Default for ExpertTiles {
    fn default() -> Self {
        ExpertTiles { row_block: 32, col_block: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertBackend {
    /// Grouped GEMM with materialized hidden activations.
    Grouped,
    /// Block-sparse attention with the log-gelu score modifier.
    BlockSparse,
}

impl ExpertBackend {
    pub fn name(self) -> &'static str {
        match self {
            ExpertBackend::Grouped => "grouped",
            ExpertBackend::BlockSparse => "block-sparse",
        }
    }
}

fn check_expert_inputs<T: Scalar>(xc: &Tensor<T>, plan: &ClusterPlan, bank: &ExpertBank<T>) -> Result<()> {
    if plan.n_experts() != bank.n_experts() {
        return Err(Error::Plan(format!(
            "plan has {} experts, bank {}",
            plan.n_experts(),
            bank.n_experts()
        )));
    }
    if xc.shape() != [plan.n_replicas(), bank.d_h()] {
        return Err(Error::Shape(format!(
            "clustered input {:?} does not match plan ({} replicas) and d_h {}",
            xc.shape(),
            plan.n_replicas(),
            bank.d_h()
        )));
    }
    Ok(())
}

fn check_tiles(tiles: ExpertTiles) -> Result<()> {
    if tiles.row_block == 0 || tiles.col_block == 0 {
        return Err(Error::InvalidParameter("expert tile sizes must be >= 1".into()));
    }
    Ok(())
}

/// Grouped-GEMM reference. The up-projection kernel writes `gelu(X·W_inᵀ)`
/// for every replica to HBM; the down-projection kernel reads it back.
pub fn experts_naive<T: Scalar>(
    xc: &Tensor<T>,
    plan: &ClusterPlan,
    bank: &ExpertBank<T>,
    tiles: ExpertTiles,
    arena: &mut Arena,
) -> Result<Tensor<T>> {
    check_expert_inputs(xc, plan, bank)?;
    check_tiles(tiles)?;
    let (de, dh) = (bank.d_e(), bank.d_h());
    let r_total = plan.n_replicas();
    let x = xc.data();
    let hidden_buf = arena.hbm_alloc(r_total * de);
    let mut hidden = vec![T::zero(); r_total * de];

    // Up-projection + activation.
    for e in 0..bank.n_experts() {
        let seg = plan.segment(e);
        for p0 in seg.clone().step_by(tiles.row_block) {
            let p1 = (p0 + tiles.row_block).min(seg.end);
            let n = p1 - p0;
            let (hx, xt) = arena.load_tile("x_tile", &x[p0 * dh..p1 * dh])?;
            for c0 in (0..de).step_by(tiles.col_block) {
                let c1 = (c0 + tiles.col_block).min(de);
                let cw = c1 - c0;
                let w = &bank.w_in.data()[(e * de + c0) * dh..(e * de + c1) * dh];
                let (hw, wt) = arena.load_tile("w_in_tile", w)?;
                let hh = arena.scratch("h_tile", n * cw)?;
                let mut ht = vec![T::zero(); n * cw];
                matmul_nt_into(&xt, &wt, &mut ht, n, dh, cw);
                ht.iter_mut().for_each(|v| *v = gelu_scalar(*v));
                arena.add_flops((2 * n * cw * dh) as u64);
                arena.store_intermediate_words(hh, n * cw)?;
                for r in 0..n {
                    hidden[(p0 + r) * de + c0..(p0 + r) * de + c1].copy_from_slice(&ht[r * cw..(r + 1) * cw]);
                }
                arena.free(hw)?;
                arena.free(hh)?;
            }
            arena.free(hx)?;
        }
    }

    // Down-projection.
    let mut out = Tensor::zeros(&[r_total, dh]);
    for e in 0..bank.n_experts() {
        let seg = plan.segment(e);
        for p0 in seg.clone().step_by(tiles.row_block) {
            let p1 = (p0 + tiles.row_block).min(seg.end);
            let n = p1 - p0;
            let hy = arena.scratch("y_acc", n * dh)?;
            let mut yt = vec![T::zero(); n * dh];
            let mut part = vec![T::zero(); n * dh];
            for c0 in (0..de).step_by(tiles.col_block) {
                let c1 = (c0 + tiles.col_block).min(de);
                let cw = c1 - c0;
                let hh = arena.load_intermediate_words("h_tile", n * cw)?;
                let mut ht = Vec::with_capacity(n * cw);
                for r in 0..n {
                    ht.extend_from_slice(&hidden[(p0 + r) * de + c0..(p0 + r) * de + c1]);
                }
                let w = &bank.w_out.data()[(e * de + c0) * dh..(e * de + c1) * dh];
                let (hw, wt) = arena.load_tile("w_out_tile", w)?;
                matmul_into(&ht, &wt, &mut part, n, cw, dh);
                for (y, &v) in yt.iter_mut().zip(&part) {
                    *y += v;
                }
                arena.add_flops((2 * n * cw * dh) as u64);
                arena.free(hh)?;
                arena.free(hw)?;
            }
            arena.store_tile(hy, &yt, &mut out.data_mut()[p0 * dh..p1 * dh])?;
            arena.free(hy)?;
        }
    }
    arena.hbm_free(hidden_buf);
    Ok(out)
}

/// Block-sparse output before recovery: `O'` per replica and `log ℓ`.
#[derive(Clone, Debug)]
pub struct AttentionState<T> {
    pub o_prime: Tensor<T>,
    pub log_l: Vec<T>,
}

/// Streaming masked softmax with `score_mod(s) = log(gelu(s) + 1)`.
///
/// Replica `p` attends only to the key rows of its own expert. Key blocks
/// outside the [`BlockMask`] are skipped; boundary blocks are masked per
/// score.
pub fn blocksparse_attention<T: Scalar>(
    xc: &Tensor<T>,
    plan: &ClusterPlan,
    bank: &ExpertBank<T>,
    tiles: ExpertTiles,
    arena: &mut Arena,
) -> Result<AttentionState<T>> {
    check_expert_inputs(xc, plan, bank)?;
    check_tiles(tiles)?;
    let (de, dh) = (bank.d_e(), bank.d_h());
    let r_total = plan.n_replicas();
    let mask = BlockMask::from_plan(plan, de, tiles.row_block, tiles.col_block)?;
    let experts = plan.position_experts();
    let keys = bank.w_in.data();
    let values = bank.w_out.data();
    let x = xc.data();
    let mut o_prime = Tensor::zeros(&[r_total, dh]);
    let mut log_l = vec![T::zero(); r_total];

    for rb in 0..mask.n_row_blocks {
        let p0 = rb * tiles.row_block;
        let p1 = (p0 + tiles.row_block).min(r_total);
        let n = p1 - p0;
        let (hq, qt) = arena.load_tile("q_tile", &x[p0 * dh..p1 * dh])?;
        let hstate = arena.scratch("m_l", 2 * n)?;
        let hacc = arena.scratch("o_acc", n * dh)?;
        let mut run_max = vec![T::neg_infinity(); n];
        let mut run_sum = vec![T::zero(); n];
        let mut acc = vec![T::zero(); n * dh];

        for cb in mask.occupied_cols(rb) {
            let c0 = cb * tiles.col_block;
            let c1 = (c0 + tiles.col_block).min(keys.len() / dh);
            let cw = c1 - c0;
            let (hk, kt) = arena.load_tile("k_tile", &keys[c0 * dh..c1 * dh])?;
            let (hv, vt) = arena.load_tile("v_tile", &values[c0 * dh..c1 * dh])?;
            let hs = arena.scratch("s_tile", n * cw)?;
            let mut z = vec![T::zero(); cw];
            for r in 0..n {
                let e = experts[p0 + r];
                let lo = (e * de).max(c0);
                let hi = ((e + 1) * de).min(c1);
                if lo >= hi {
                    continue;
                }
                let q = &qt[r * dh..(r + 1) * dh];
                let mut tile_max = T::neg_infinity();
                for j in lo..hi {
                    let kr = &kt[(j - c0) * dh..(j - c0 + 1) * dh];
                    let s = crate::tensor::dot(q, kr);
                    let zj = (gelu_scalar(s) + T::one()).ln();
                    z[j - c0] = zj;
                    tile_max = tile_max.max(zj);
                }
                let new_max = run_max[r].max(tile_max);
                let corr = (run_max[r] - new_max).exp();
                let a = &mut acc[r * dh..(r + 1) * dh];
                a.iter_mut().for_each(|v| *v *= corr);
                let mut sum = run_sum[r] * corr;
                for j in lo..hi {
                    let pj = (z[j - c0] - new_max).exp();
                    sum += pj;
                    let vr = &vt[(j - c0) * dh..(j - c0 + 1) * dh];
                    for (o, &v) in a.iter_mut().zip(vr) {
                        *o += pj * v;
                    }
                }
                run_sum[r] = sum;
                run_max[r] = new_max;
                arena.add_flops((4 * (hi - lo) * dh) as u64);
            }
            for h in [hk, hv, hs] {
                arena.free(h)?;
            }
        }

        for r in 0..n {
            if run_sum[r] == T::zero() {
                return Err(Error::Plan(format!("replica {} attended to no keys", p0 + r)));
            }
            let inv = T::one() / run_sum[r];
            for c in 0..dh {
                acc[r * dh + c] *= inv;
            }
            log_l[p0 + r] = run_max[r] + run_sum[r].ln();
        }
        arena.store_intermediate_tile(hacc, &acc, &mut o_prime.data_mut()[p0 * dh..p1 * dh])?;
        arena.store_intermediate_words(hstate, n)?;
        for h in [hq, hstate, hacc] {
            arena.free(h)?;
        }
    }
    Ok(AttentionState { o_prime, log_l })
}

/// IO-aware backend: block-sparse attention followed by the recovery
/// `O'·ℓ − Σ_j V_j[expert]`.
pub fn experts_blocksparse<T: Scalar>(
    xc: &Tensor<T>,
    plan: &ClusterPlan,
    bank: &ExpertBank<T>,
    tiles: ExpertTiles,
    arena: &mut Arena,
) -> Result<Tensor<T>> {
    let dh = bank.d_h();
    let r_total = plan.n_replicas();
    let vsum = bank.value_row_sums();
    let state_buf = arena.hbm_alloc(r_total * (dh + 1));
    let state = blocksparse_attention(xc, plan, bank, tiles, arena)?;

    let experts = plan.position_experts();
    let mut out = Tensor::zeros(&[r_total, dh]);
    for p0 in (0..r_total).step_by(tiles.row_block) {
        let p1 = (p0 + tiles.row_block).min(r_total);
        let n = p1 - p0;
        let ho = arena.load_intermediate_words("o_prime", n * dh)?;
        let hl = arena.load_intermediate_words("log_l", n)?;
        let hg = arena.load_words("vsum_gather", n * dh)?;
        let mut yt = vec![T::zero(); n * dh];
        for r in 0..n {
            let p = p0 + r;
            let ell = state.log_l[p].exp();
            let e = experts[p];
            for c in 0..dh {
                yt[r * dh + c] = state.o_prime.data()[p * dh + c] * ell - vsum[e * dh + c];
            }
        }
        arena.store_tile(ho, &yt, &mut out.data_mut()[p0 * dh..p1 * dh])?;
        for h in [ho, hl, hg] {
            arena.free(h)?;
        }
    }
    arena.hbm_free(state_buf);
    Ok(out)
}

/// Backend dispatch.
pub fn run_experts<T: Scalar>(
    backend: ExpertBackend,
    xc: &Tensor<T>,
    plan: &ClusterPlan,
    bank: &ExpertBank<T>,
    tiles: ExpertTiles,
    arena: &mut Arena,
) -> Result<Tensor<T>> {
    match backend {
        ExpertBackend::Grouped => experts_naive(xc, plan, bank, tiles, arena),
        ExpertBackend::BlockSparse => experts_blocksparse(xc, plan, bank, tiles, arena),
    }
}

/// Gradients of `gelu(X·W_inᵀ)·W_out` per segment. Hidden activations are
/// recomputed per tile in SRAM and never written to HBM.
///
/// Returns `(dx [R, d_h], dw_in, dw_out)`.
pub fn experts_backward<T: Scalar>(
    xc: &Tensor<T>,
    plan: &ClusterPlan,
    bank: &ExpertBank<T>,
    d_out: &Tensor<T>,
    tiles: ExpertTiles,
    arena: &mut Arena,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check_expert_inputs(xc, plan, bank)?;
    check_tiles(tiles)?;
    if d_out.shape() != xc.shape() {
        return Err(Error::Shape(format!("d_out {:?} vs input {:?}", d_out.shape(), xc.shape())));
    }
    let (de, dh) = (bank.d_e(), bank.d_h());
    let x = xc.data();
    let dy = d_out.data();
    let mut dx = Tensor::zeros(xc.shape());
    let mut dw_in = Tensor::zeros(bank.w_in.shape());
    let mut dw_out = Tensor::zeros(bank.w_out.shape());

    for e in 0..bank.n_experts() {
        let seg = plan.segment(e);
        for p0 in seg.clone().step_by(tiles.row_block) {
            let p1 = (p0 + tiles.row_block).min(seg.end);
            let n = p1 - p0;
            let (hx, xt) = arena.load_tile("x_tile", &x[p0 * dh..p1 * dh])?;
            let (hdy, dyt) = arena.load_tile("dy_tile", &dy[p0 * dh..p1 * dh])?;
            let hdx = arena.scratch("dx_acc", n * dh)?;
            let mut dxt = vec![T::zero(); n * dh];
            for c0 in (0..de).step_by(tiles.col_block) {
                let c1 = (c0 + tiles.col_block).min(de);
                let cw = c1 - c0;
                let wr = (e * de + c0) * dh..(e * de + c1) * dh;
                let (hwi, wi) = arena.load_tile("w_in_tile", &bank.w_in.data()[wr.clone()])?;
                let (hwo, wo) = arena.load_tile("w_out_tile", &bank.w_out.data()[wr.clone()])?;
                let ha = arena.scratch("pre_act", 2 * n * cw)?;
                let hgw = arena.scratch("dw_partial", 2 * cw * dh)?;

                let mut pre = vec![T::zero(); n * cw];
                matmul_nt_into(&xt, &wi, &mut pre, n, dh, cw);
                let mut dh_t = vec![T::zero(); n * cw];
                matmul_nt_into(&dyt, &wo, &mut dh_t, n, dh, cw);
                let mut dwo = vec![T::zero(); cw * dh];
                let mut dwi = vec![T::zero(); cw * dh];
                for r in 0..n {
                    for j in 0..cw {
                        let a = pre[r * cw + j];
                        let hval = gelu_scalar(a);
                        let da = dh_t[r * cw + j] * gelu_grad_scalar(a);
                        let dyr = &dyt[r * dh..(r + 1) * dh];
                        let xr = &xt[r * dh..(r + 1) * dh];
                        let wir = &wi[j * dh..(j + 1) * dh];
                        for c in 0..dh {
                            dwo[j * dh + c] += hval * dyr[c];
                            dwi[j * dh + c] += da * xr[c];
                            dxt[r * dh + c] += da * wir[c];
                        }
                    }
                }
                arena.add_flops((10 * n * cw * dh) as u64);
                arena.atomic_accumulate(hgw, &dwo, &mut dw_out.data_mut()[wr.clone()])?;
                arena.atomic_accumulate(hgw, &dwi, &mut dw_in.data_mut()[wr])?;
                for h in [hwi, hwo, ha, hgw] {
                    arena.free(h)?;
                }
            }
            arena.store_tile(hdx, &dxt, &mut dx.data_mut()[p0 * dh..p1 * dh])?;
            for h in [hx, hdy, hdx] {
                arena.free(h)?;
            }
        }
    }
    Ok((dx, dw_in, dw_out))
}

/// `o_t = Σ_j g[t, j] · E(x_t)` over the `k` replicas of each token.
/// `expert_out` is in clustered order; the result is `[n, d_h]`.
pub fn aggregate_weighted<T: Scalar>(expert_out: &Tensor<T>, gates: &[T], plan: &ClusterPlan) -> Result<Tensor<T>> {
    let k = plan.k;
    let n = plan.n_tokens();
    if gates.len() != n * k || expert_out.shape()[0] != plan.n_replicas() {
        return Err(Error::Shape(format!(
            "aggregate: {} gates and {:?} outputs for {} replicas",
            gates.len(),
            expert_out.shape(),
            plan.n_replicas()
        )));
    }
    let dh = expert_out.shape()[1];
    let eo = expert_out.data();
    let mut out = Tensor::zeros(&[n, dh]);
    for t in 0..n {
        let o = &mut out.data_mut()[t * dh..(t + 1) * dh];
        for j in 0..k {
            let p = plan.inverse_permutation[t * k + j];
            let g = gates[t * k + j];
            for (v, &y) in o.iter_mut().zip(&eo[p * dh..(p + 1) * dh]) {
                *v += g * y;
            }
        }
    }
    Ok(out)
}

/// Backward of [`aggregate_weighted`]: `(d_expert_out [R, d_h] clustered,
/// d_gates [n·k])`.
pub fn aggregate_backward<T: Scalar>(
    expert_out: &Tensor<T>,
    gates: &[T],
    plan: &ClusterPlan,
    d_o: &[T],
) -> (Tensor<T>, Vec<T>) {
    let k = plan.k;
    let n = plan.n_tokens();
    let dh = expert_out.shape()[1];
    let eo = expert_out.data();
    let mut d_eo = Tensor::zeros(expert_out.shape());
    let mut d_g = vec![T::zero(); n * k];
    for t in 0..n {
        let dot_row = &d_o[t * dh..(t + 1) * dh];
        for j in 0..k {
            let p = plan.inverse_permutation[t * k + j];
            let g = gates[t * k + j];
            let y = &eo[p * dh..(p + 1) * dh];
            d_g[t * k + j] = crate::tensor::dot(y, dot_row);
            for (d, &v) in d_eo.data_mut()[p * dh..(p + 1) * dh].iter_mut().zip(dot_row) {
                *d = g * v;
            }
        }
    }
    (d_eo, d_g)
}
