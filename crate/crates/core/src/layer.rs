//! Single-head MoE module, the multi-head latent layer and a dense MLP
//! baseline.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{
    aggregate_backward, aggregate_weighted, build_cluster_plan, experts_backward, run_experts, ClusterPlan,
    ExpertBackend, ExpertBank, ExpertTiles,
};
use crate::memory::Arena;
use crate::rng::Rng;
use crate::router::{
    gate_backward, gate_from_scores, route_ioaware_bwd, route_ioaware_fwd, route_naive, update_balance_bias,
    LoadBalanceState, RouteBlocks, RouterParams, TopKResult,
};
use crate::tensor::{gelu_scalar, matmul_into, matmul_nt_into, Scalar, Tensor};

pub const DEFAULT_INIT_STD: f64 = 0.02;
pub const DEFAULT_N_LAYERS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterMode {
    Naive,
    IoAware,
}

impl RouterMode {
    pub fn name(self) -> &'static str {
        match self {
            RouterMode::Naive => "naive",
            RouterMode::IoAware => "io-aware",
        }
    }
}

/// Kernel selection and tiling for one layer invocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecConfig {
    pub router: RouterMode,
    pub route_blocks: RouteBlocks,
    pub backend: ExpertBackend,
    pub tiles: ExpertTiles,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            router: RouterMode::IoAware,
            route_blocks: RouteBlocks::default(),
            backend: ExpertBackend::BlockSparse,
            tiles: ExpertTiles::default(),
        }
    }
}

impl ExecConfig {
    pub fn with_backend(mut self, backend: ExpertBackend) -> Self {
        self.backend = backend;
        self
    }

    pub fn with_router(mut self, router: RouterMode) -> Self {
        self.router = router;
        self
    }
}

/// One independent MoE instance: a single-head router plus its expert bank.
#[derive(Clone, Debug, PartialEq)]
pub struct MoEModule<T = f32> {
    pub router: RouterParams<T>,
    pub bank: ExpertBank<T>,
    pub k: usize,
}

impl<T: Scalar> MoEModule<T> {
    pub fn new(router: RouterParams<T>, bank: ExpertBank<T>, k: usize) -> Result<Self> {
        let m = MoEModule { router, bank, k };
        m.validate()?;
        Ok(m)
    }

    pub fn init(rng: &mut Rng, d_h: usize, n_experts: usize, d_e: usize, k: usize, std: f64) -> Result<Self> {
        let router = RouterParams::init(rng, 1, d_h, n_experts, std);
        let bank = ExpertBank::init(rng, n_experts, d_e, d_h, std);
        MoEModule::new(router, bank, k)
    }

    pub fn validate(&self) -> Result<()> {
        self.router.validate()?;
        if self.router.n_heads() != 1 {
            return Err(Error::Shape("MoE module router must have exactly one head".into()));
        }
        if self.router.d_h() != self.bank.d_h() || self.router.n_experts() != self.bank.n_experts() {
            return Err(Error::Shape(format!(
                "router [{}, {}] does not match expert bank [{}, {}]",
                self.router.d_h(),
                self.router.n_experts(),
                self.bank.d_h(),
                self.bank.n_experts()
            )));
        }
        if self.k == 0 || self.k > self.n_experts() {
            return Err(Error::InvalidParameter(format!("k = {} outside 1..={}", self.k, self.n_experts())));
        }
        Ok(())
    }

    pub fn d_h(&self) -> usize {
        self.bank.d_h()
    }

    pub fn d_e(&self) -> usize {
        self.bank.d_e()
    }

    pub fn n_experts(&self) -> usize {
        self.bank.n_experts()
    }

    pub fn cast<U: Scalar>(&self) -> MoEModule<U> {
        MoEModule { router: self.router.cast(), bank: self.bank.cast(), k: self.k }
    }
}

/// State retained by [`moe_forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MoECache<T> {
    pub x_route: Tensor<T>,
    pub topk: TopKResult<T>,
    pub gates: Tensor<T>,
    pub plan: ClusterPlan,
    pub xc: Tensor<T>,
    pub expert_out: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoEGrads<T> {
    pub w_r: Tensor<T>,
    pub w_in: Tensor<T>,
    pub w_out: Tensor<T>,
}

impl<T: Scalar> MoEGrads<T> {
    pub fn zeros_like(m: &MoEModule<T>) -> Self {
        MoEGrads {
            w_r: Tensor::zeros(m.router.w_r.shape()),
            w_in: Tensor::zeros(m.bank.w_in.shape()),
            w_out: Tensor::zeros(m.bank.w_out.shape()),
        }
    }
}

fn check_tokens<T: Scalar>(x: &Tensor<T>, d: usize, what: &str) -> Result<usize> {
    if x.ndim() != 2 || x.shape()[1] != d {
        return Err(Error::Shape(format!("{what}: expected [n, {d}], got {:?}", x.shape())));
    }
    Ok(x.shape()[0])
}

fn route<T: Scalar>(
    m: &MoEModule<T>,
    r: &Tensor<T>,
    exec: &ExecConfig,
    arena: &mut Arena,
) -> Result<TopKResult<T>> {
    match exec.router {
        RouterMode::Naive => route_naive(r, &m.router, m.k, arena),
        RouterMode::IoAware => route_ioaware_fwd(r, &m.router, m.k, exec.route_blocks, arena),
    }
}

/// `o_t = Σ_i g_{i,t} E_i(x_t)` for `x: [n, d_h]`.
pub fn moe_forward<T: Scalar>(m: &MoEModule<T>, x: &Tensor<T>, exec: &ExecConfig, arena: &mut Arena) -> Result<Tensor<T>> {
    Ok(moe_forward_cached(m, x, x, exec, arena)?.0)
}

/// Routes on `r` and computes on `x`; both `[n, d_h]`.
pub fn moe_forward_cached<T: Scalar>(
    m: &MoEModule<T>,
    x: &Tensor<T>,
    r: &Tensor<T>,
    exec: &ExecConfig,
    arena: &mut Arena,
) -> Result<(Tensor<T>, MoECache<T>)> {
    m.validate()?;
    let dh = m.d_h();
    let n = check_tokens(x, dh, "moe_forward input")?;
    if check_tokens(r, dh, "moe_forward routing input")? != n {
        return Err(Error::Shape("routing and compute inputs differ in token count".into()));
    }
    let x_route = r.clone().reshape(&[1, n, 1, dh])?;
    let topk = route(m, &x_route, exec, arena)?;
    let gates = gate_from_scores(&topk);
    let plan = build_cluster_plan(topk.indices.data(), m.k, m.n_experts())?;
    let xc = Tensor::from_vec(&[n * m.k, dh], plan.permute_tokens(x.data(), dh))?;
    let expert_out = run_experts(exec.backend, &xc, &plan, &m.bank, exec.tiles, arena)?;
    let out = aggregate_weighted(&expert_out, gates.data(), &plan)?;
    Ok((out, MoECache { x_route, topk, gates, plan, xc, expert_out }))
}

/// Returns `(dx, dr, grads)`: gradients with respect to the compute input,
/// the routing input and the module weights. The load-balance bias has no
/// gradient.
pub fn moe_backward<T: Scalar>(
    m: &MoEModule<T>,
    cache: &MoECache<T>,
    d_out: &Tensor<T>,
    exec: &ExecConfig,
    arena: &mut Arena,
) -> Result<(Tensor<T>, Tensor<T>, MoEGrads<T>)> {
    let dh = m.d_h();
    let k = m.k;
    let n = cache.plan.n_tokens();
    if d_out.shape() != [n, dh] {
        return Err(Error::Shape(format!("d_out {:?}, expected [{n}, {dh}]", d_out.shape())));
    }
    let (d_eo, d_g) = aggregate_backward(&cache.expert_out, cache.gates.data(), &cache.plan, d_out.data());
    let (dxc, w_in, w_out) = experts_backward(&cache.xc, &cache.plan, &m.bank, &d_eo, exec.tiles, arena)?;
    let mut dx = Tensor::zeros(&[n, dh]);
    for t in 0..n {
        for j in 0..k {
            let p = cache.plan.inverse_permutation[t * k + j];
            for (d, &v) in dx.data_mut()[t * dh..(t + 1) * dh].iter_mut().zip(&dxc.data()[p * dh..(p + 1) * dh]) {
                *d += v;
            }
        }
    }
    let d_gates = Tensor::from_vec(cache.gates.shape(), d_g)?;
    let d_scores = gate_backward(&cache.gates, &d_gates, k);
    let (dr, w_r) = route_ioaware_bwd(
        &cache.x_route,
        &m.router,
        &cache.topk,
        &d_scores,
        exec.route_blocks.block_n,
        arena,
    )?;
    Ok((dx, dr.reshape(&[n, dh])?, MoEGrads { w_r, w_in, w_out }))
}

/// Shape parameters of the multi-head layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub d: usize,
    pub n_heads: usize,
    pub d_h: usize,
    pub n_experts: usize,
    pub k: usize,
    pub d_e: usize,
    pub n_layers: usize,
    #[serde(default)]
    pub separate_routing: bool,
}

impl LayerDims {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("d", self.d),
            ("n_heads", self.n_heads),
            ("d_h", self.d_h),
            ("n_experts", self.n_experts),
            ("k", self.k),
            ("d_e", self.d_e),
            ("n_layers", self.n_layers),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.k > self.n_experts {
            return Err(Error::Config(format!("k = {} exceeds n_experts = {}", self.k, self.n_experts)));
        }
        if self.n_heads * self.d_h != self.d {
            return Err(Error::Config(format!(
                "n_heads * d_h = {} must equal d = {}",
                self.n_heads * self.d_h,
                self.d
            )));
        }
        Ok(())
    }

    /// Output rows of the input projection.
    pub fn d_proj(&self) -> usize {
        if self.separate_routing {
            2 * self.n_heads * self.d_h
        } else {
            self.n_heads * self.d_h
        }
    }
}

/// Multi-head latent MoE: `o = W_out · concat(f_1(x_1), …, f_{N_h}(x_{N_h}))`
/// with `[x_1, …] = split(W_in · x)`. With separate routing the projection
/// also yields routing sub-tokens `r_i` and head `i` routes on `r_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MHLatentMoEParams<T = f32> {
    /// `[d_proj, d]`.
    pub w_in: Tensor<T>,
    /// `[d, N_h·d_h]`.
    pub w_out: Tensor<T>,
    pub heads: Vec<MoEModule<T>>,
    pub separate_routing: bool,
}

impl<T: Scalar> MHLatentMoEParams<T> {
    pub fn init(rng: &mut Rng, dims: &LayerDims) -> Result<Self> {
        dims.validate()?;
        let std = DEFAULT_INIT_STD;
        let w_in = rng.normal_tensor(&[dims.d_proj(), dims.d], std);
        let w_out = rng.normal_tensor(&[dims.d, dims.n_heads * dims.d_h], std / (2.0 * dims.n_layers as f64).sqrt());
        let heads = (0..dims.n_heads)
            .map(|_| MoEModule::init(rng, dims.d_h, dims.n_experts, dims.d_e, dims.k, std))
            .collect::<Result<Vec<_>>>()?;
        let p = MHLatentMoEParams { w_in, w_out, heads, separate_routing: dims.separate_routing };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Shape("layer needs at least one head".into()));
        }
        let dh = self.heads[0].d_h();
        for h in &self.heads {
            h.validate()?;
            if h.d_h() != dh {
                return Err(Error::Shape("all heads must share d_h".into()));
            }
        }
        let nh = self.heads.len();
        let factor = if self.separate_routing { 2 } else { 1 };
        let (rows, d) = self.w_in.dims2("w_in")?;
        if rows != factor * nh * dh {
            return Err(Error::Shape(format!("w_in has {rows} rows, expected {}", factor * nh * dh)));
        }
        if self.w_out.shape() != [d, nh * dh] {
            return Err(Error::Shape(format!("w_out {:?}, expected [{d}, {}]", self.w_out.shape(), nh * dh)));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_h(&self) -> usize {
        self.heads[0].d_h()
    }

    pub fn cast<U: Scalar>(&self) -> MHLatentMoEParams<U> {
        MHLatentMoEParams {
            w_in: self.w_in.cast(),
            w_out: self.w_out.cast(),
            heads: self.heads.iter().map(|h| h.cast()).collect(),
            separate_routing: self.separate_routing,
        }
    }

    /// Applies `θ −= lr·∇θ` to every weight. Biases are left to the
    /// balance updater.
    pub fn sgd_step(&mut self, grads: &MHGrads<T>, lr: T) {
        fn step<T: Scalar>(p: &mut Tensor<T>, g: &Tensor<T>, lr: T) {
            for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        step(&mut self.w_in, &grads.w_in, lr);
        step(&mut self.w_out, &grads.w_out, lr);
        for (h, g) in self.heads.iter_mut().zip(&grads.heads) {
            step(&mut h.router.w_r, &g.w_r, lr);
            step(&mut h.bank.w_in, &g.w_in, lr);
            step(&mut h.bank.w_out, &g.w_out, lr);
        }
    }

    /// One aux-free balancing update per head from `state` (one row per head).
    pub fn apply_balance(&mut self, state: &LoadBalanceState) -> Result<()> {
        if state.n_heads != self.n_heads() {
            return Err(Error::Shape("balance state head count mismatch".into()));
        }
        for (h, head) in self.heads.iter_mut().enumerate() {
            let single = LoadBalanceState {
                n_heads: 1,
                n_experts: state.n_experts,
                expert_load: state.head_load(h).to_vec(),
                update_rate: state.update_rate,
            };
            update_balance_bias(&single, &mut head.router)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MHCache<T> {
    /// Flattened input `[n, d]`.
    pub x: Tensor<T>,
    /// Projected tokens `[n, d_proj]`.
    pub z: Tensor<T>,
    /// Concatenated head outputs `[n, N_h·d_h]`.
    pub y: Tensor<T>,
    pub heads: Vec<MoECache<T>>,
    pub out_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MHGrads<T> {
    pub w_in: Tensor<T>,
    pub w_out: Tensor<T>,
    pub heads: Vec<MoEGrads<T>>,
    pub x: Tensor<T>,
}

fn column_slice<T: Scalar>(m: &Tensor<T>, c0: usize, width: usize) -> Tensor<T> {
    let (n, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = Vec::with_capacity(n * width);
    for r in 0..n {
        out.extend_from_slice(&m.data()[r * cols + c0..r * cols + c0 + width]);
    }
    Tensor::from_vec(&[n, width], out).expect("column slice shape")
}

fn add_columns<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, c0: usize) {
    let cols = dst.shape()[1];
    let width = src.shape()[1];
    for r in 0..src.shape()[0] {
        for (d, &v) in dst.data_mut()[r * cols + c0..r * cols + c0 + width]
            .iter_mut()
            .zip(&src.data()[r * width..(r + 1) * width])
        {
            *d += v;
        }
    }
}

/// `x: [..., d]` (typically `[B, T, d]`).
pub fn mh_latentmoe_forward<T: Scalar>(
    p: &MHLatentMoEParams<T>,
    x: &Tensor<T>,
    exec: &ExecConfig,
    arena: &mut Arena,
) -> Result<Tensor<T>> {
    Ok(mh_latentmoe_forward_cached(p, x, exec, arena)?.0)
}

pub fn mh_latentmoe_forward_cached<T: Scalar>(
    p: &MHLatentMoEParams<T>,
    x: &Tensor<T>,
    exec: &ExecConfig,
    arena: &mut Arena,
) -> Result<(Tensor<T>, MHCache<T>)> {
    p.validate()?;
    let d = p.d();
    if x.ndim() == 0 || *x.shape().last().unwrap() != d {
        return Err(Error::Shape(format!("layer input {:?} must end in d = {d}", x.shape())));
    }
    let n = x.len() / d;
    let (nh, dh) = (p.n_heads(), p.d_h());
    let dp = p.w_in.shape()[0];
    let x2 = x.clone().reshape(&[n, d])?;
    let mut z = Tensor::zeros(&[n, dp]);
    matmul_nt_into(x2.data(), p.w_in.data(), z.data_mut(), n, d, dp);

    let mut y = Tensor::zeros(&[n, nh * dh]);
    let mut caches = Vec::with_capacity(nh);
    for (i, head) in p.heads.iter().enumerate() {
        let xi = column_slice(&z, i * dh, dh);
        let ri = if p.separate_routing { column_slice(&z, (nh + i) * dh, dh) } else { xi.clone() };
        let (oi, cache) = moe_forward_cached(head, &xi, &ri, exec, arena)?;
        add_columns(&mut y, &oi, i * dh);
        caches.push(cache);
    }
    let mut out = Tensor::zeros(&[n, d]);
    matmul_nt_into(y.data(), p.w_out.data(), out.data_mut(), n, nh * dh, d);
    let out = out.reshape(x.shape())?;
    Ok((out.clone(), MHCache { x: x2, z, y, heads: caches, out_shape: x.shape().to_vec() }))
}

pub fn mh_latentmoe_backward_cached<T: Scalar>(
    p: &MHLatentMoEParams<T>,
    cache: &MHCache<T>,
    d_out: &Tensor<T>,
    exec: &ExecConfig,
    arena: &mut Arena,
) -> Result<MHGrads<T>> {
    if d_out.shape() != &cache.out_shape[..] {
        return Err(Error::Shape(format!("d_out {:?} vs output {:?}", d_out.shape(), cache.out_shape)));
    }
    let d = p.d();
    let n = cache.x.shape()[0];
    let (nh, dh) = (p.n_heads(), p.d_h());
    let dp = p.w_in.shape()[0];
    let dout = d_out.data();

    // o = y·W_outᵀ
    let mut w_out = Tensor::zeros(p.w_out.shape());
    let dout_t = Tensor::from_vec(&[n, d], dout.to_vec())?.transpose()?;
    matmul_into(dout_t.data(), cache.y.data(), w_out.data_mut(), d, n, nh * dh);
    let mut dy = Tensor::zeros(&[n, nh * dh]);
    matmul_into(dout, p.w_out.data(), dy.data_mut(), n, d, nh * dh);

    let mut dz = Tensor::zeros(&[n, dp]);
    let mut heads = Vec::with_capacity(nh);
    for (i, head) in p.heads.iter().enumerate() {
        let dyi = column_slice(&dy, i * dh, dh);
        let (dxi, dri, g) = moe_backward(head, &cache.heads[i], &dyi, exec, arena)?;
        add_columns(&mut dz, &dxi, i * dh);
        let route_col = if p.separate_routing { (nh + i) * dh } else { i * dh };
        add_columns(&mut dz, &dri, route_col);
        heads.push(g);
    }

    // z = x·W_inᵀ
    let mut w_in = Tensor::zeros(p.w_in.shape());
    let dz_t = dz.transpose()?;
    matmul_into(dz_t.data(), cache.x.data(), w_in.data_mut(), dp, n, d);
    let mut dx = Tensor::zeros(&[n, d]);
    matmul_into(dz.data(), p.w_in.data(), dx.data_mut(), n, dp, d);
    Ok(MHGrads { w_in, w_out, heads, x: dx.reshape(&cache.out_shape)? })
}

/// Recomputes the forward pass and returns all gradients.
pub fn mh_latentmoe_backward<T: Scalar>(
    p: &MHLatentMoEParams<T>,
    x: &Tensor<T>,
    d_out: &Tensor<T>,
    exec: &ExecConfig,
    arena: &mut Arena,
) -> Result<MHGrads<T>> {
    let (_, cache) = mh_latentmoe_forward_cached(p, x, exec, arena)?;
    mh_latentmoe_backward_cached(p, &cache, d_out, exec, arena)
}

/// Dense baseline `W_out · gelu(W_in · x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MLPParams<T = f32> {
    /// `[d_ff, d]`.
    pub w_in: Tensor<T>,
    /// `[d, d_ff]`.
    pub w_out: Tensor<T>,
}

impl<T: Scalar> MLPParams<T> {
    pub fn init(rng: &mut Rng, d: usize, d_ff: usize, std: f64) -> Self {
        MLPParams { w_in: rng.normal_tensor(&[d_ff, d], std), w_out: rng.normal_tensor(&[d, d_ff], std) }
    }
}

pub fn mlp_forward<T: Scalar>(p: &MLPParams<T>, x: &Tensor<T>, arena: &mut Arena) -> Result<Tensor<T>> {
    let (d_ff, d) = p.w_in.dims2("mlp w_in")?;
    if p.w_out.shape() != [d, d_ff] {
        return Err(Error::Shape(format!("mlp w_out {:?}, expected [{d}, {d_ff}]", p.w_out.shape())));
    }
    if x.ndim() == 0 || *x.shape().last().unwrap() != d {
        return Err(Error::Shape(format!("mlp input {:?} must end in d = {d}", x.shape())));
    }
    let n = x.len() / d;
    let mut h = vec![T::zero(); n * d_ff];
    matmul_nt_into(x.data(), p.w_in.data(), &mut h, n, d, d_ff);
    h.iter_mut().for_each(|v| *v = gelu_scalar(*v));
    let mut out = Tensor::zeros(x.shape());
    matmul_nt_into(&h, p.w_out.data(), out.data_mut(), n, d_ff, d);
    arena.add_flops((4 * n * d * d_ff) as u64);
    Ok(out)
}

/// Router plus expert FLOPs of one MoE instance on `n` tokens.
pub fn moe_flops(n: usize, d_h: usize, n_experts: usize, k: usize, d_e: usize) -> u64 {
    (2 * n * d_h * n_experts + 4 * n * k * d_e * d_h) as u64
}

/// Router plus expert FLOPs of the multi-head layer, projections excluded.
pub fn mh_flops(dims: &LayerDims, n: usize) -> u64 {
    dims.n_heads as u64 * moe_flops(n, dims.d_h, dims.n_experts, dims.k, dims.d_e)
}

pub fn mlp_flops(n: usize, d: usize, d_ff: usize) -> u64 {
    (4 * n * d * d_ff) as u64
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    k: usize,
    n_heads: usize,
    separate_routing: bool,
    tensors: BTreeMap<String, CheckpointEntry>,
}

fn named_tensors(p: &MHLatentMoEParams<f32>) -> BTreeMap<String, &Tensor<f32>> {
    let mut m = BTreeMap::new();
    m.insert("w_in".to_string(), &p.w_in);
    m.insert("w_out".to_string(), &p.w_out);
    for (i, h) in p.heads.iter().enumerate() {
        m.insert(format!("heads.{i}.router.w_r"), &h.router.w_r);
        m.insert(format!("heads.{i}.router.bias"), &h.router.bias);
        m.insert(format!("heads.{i}.experts.w_in"), &h.bank.w_in);
        m.insert(format!("heads.{i}.experts.w_out"), &h.bank.w_out);
    }
    m
}

/// Layout: `u64` LE header length, JSON header, then every tensor as LE
/// `f32` in name order.
pub fn write_checkpoint<W: Write>(p: &MHLatentMoEParams<f32>, mut out: W) -> Result<()> {
    let named = named_tensors(p);
    let mut offset = 0u64;
    let mut tensors = BTreeMap::new();
    for (name, t) in &named {
        tensors.insert(name.clone(), CheckpointEntry { shape: t.shape().to_vec(), offset });
        offset += 4 * t.len() as u64;
    }
    let header = CheckpointHeader {
        k: p.heads[0].k,
        n_heads: p.n_heads(),
        separate_routing: p.separate_routing,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for t in named.values() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<MHLatentMoEParams<f32>> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    let take = |name: &str| -> Result<Tensor<f32>> {
        let e = header
            .tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing {name}")))?;
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let bytes = body
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Config(format!("checkpoint truncated in {name}")))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::from_vec(&e.shape, data)
    };
    let w_in = take("w_in")?;
    let w_out = take("w_out")?;
    let mut heads = Vec::with_capacity(header.n_heads);
    for i in 0..header.n_heads {
        let router = RouterParams::new(take(&format!("heads.{i}.router.w_r"))?, take(&format!("heads.{i}.router.bias"))?)?;
        let bank = ExpertBank::new(take(&format!("heads.{i}.experts.w_in"))?, take(&format!("heads.{i}.experts.w_out"))?)?;
        heads.push(MoEModule::new(router, bank, header.k)?);
    }
    let p = MHLatentMoEParams { w_in, w_out, heads, separate_routing: header.separate_routing };
    p.validate()?;
    Ok(p)
}

pub fn save_checkpoint(p: &MHLatentMoEParams<f32>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(p, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MHLatentMoEParams<f32>> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
