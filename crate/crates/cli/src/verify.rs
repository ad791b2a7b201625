//! The `verify` suite: module-level equivalence, gradient and property
//! checks at the configured shapes (small fixed shapes for finite
//! differences).

use latentmoe::experts::{
    blocksparse_attention, build_cluster_plan, experts_backward, experts_blocksparse, experts_naive, ExpertBank,
    ExpertTiles,
};
use latentmoe::gradcheck::{finite_diff_grad, grad_rel_err};
use latentmoe::layer::{
    mh_latentmoe_backward_cached, mh_latentmoe_forward, mh_latentmoe_forward_cached, moe_forward, ExecConfig,
    LayerDims, MHLatentMoEParams, MoEModule, RouterMode,
};
use latentmoe::memory::{Arena, TierConfig};
use latentmoe::parallel::{ep_schedule, ep_traffic, hp_schedule, hp_traffic, zipf_assign, EpAssignment, SkewModel, WorkerGroup};
use latentmoe::router::{route_ioaware_bwd, route_ioaware_fwd, route_naive, RouteBlocks, RouterParams};
use latentmoe::tensor::{gelu_scalar, matmul_nt_into, max_abs_diff, rel_err, Tensor};
use latentmoe::{ExpertBackend, Rng};

use crate::config::RunConfig;
use crate::{Check, CliError};

/// Relative perturbation applied to one block-sparse output element when
/// fault injection is on.
pub const FAULT_SIZE: f64 = 1e-3;

pub struct Suite<'a> {
    cfg: &'a RunConfig,
    fault: bool,
    checks: Vec<Check>,
}

pub fn run_suite(cfg: &RunConfig, inject_fault: bool) -> Result<Vec<Check>, CliError> {
    let mut s = Suite { cfg, fault: inject_fault, checks: Vec::new() };
    s.router_forward()?;
    s.router_backward()?;
    s.experts_forward()?;
    s.recovery_identity()?;
    s.experts_backward()?;
    s.layer_reference()?;
    s.layer_gradients()?;
    s.parallel()?;
    Ok(s.checks)
}

fn arena(cfg: &RunConfig, label: &str) -> Result<Arena, CliError> {
    Ok(Arena::new(TierConfig::with_capacity(cfg.sram_words)?, label))
}

fn distinct_assignments(rng: &mut Rng, n: usize, k: usize, ne: usize) -> Result<Vec<u32>, CliError> {
    Ok(zipf_assign(&SkewModel::new(0.0, ne, 1)?, n, k, rng)?)
}

impl Suite<'_> {
    fn push(&mut self, c: Check) {
        self.checks.push(c);
    }

    fn router_forward(&mut self) -> Result<(), CliError> {
        let m = &self.cfg.model;
        let seed = self.cfg.seed;
        let mut rng = Rng::new(seed).fork(10);
        let x: Tensor<f32> = rng.normal_tensor(&[m.batch, m.seq_len, m.n_heads, m.d_h], 1.0);
        let mut p: RouterParams<f32> = RouterParams::init(&mut rng, m.n_heads, m.d_h, m.n_experts, 1.0 / (m.d_h as f64).sqrt());
        p.bias = rng.normal_tensor(&[m.n_heads, m.n_experts], 0.1);
        let naive = route_naive(&x, &p, m.k, &mut arena(self.cfg, "route_naive")?)?;
        let mut sizes = vec![1, m.k, 16, 64, m.n_experts];
        sizes.sort_unstable();
        sizes.dedup();
        for bm in sizes {
            let blocks = RouteBlocks { block_n: self.cfg.route_block_n, block_m: bm };
            let mut a = arena(self.cfg, "route_io")?;
            let io = route_ioaware_fwd(&x, &p, m.k, blocks, &mut a)?;
            let mismatched = io.indices.data().iter().zip(naive.indices.data()).filter(|(a, b)| a != b).count();
            self.push(Check::within("router", &format!("forward_indices_block_m{bm}"), seed, mismatched as f64, 0.0));
            let err = max_abs_diff(io.scores.data(), naive.scores.data());
            self.push(Check::within("router", &format!("forward_scores_block_m{bm}"), seed, err, 1e-6));
            let expected = 2 * (m.tokens() * m.n_heads * m.k) as u64;
            self.push(Check::holds("memory", &format!("router_output_writes_block_m{bm}"), seed, a.ledger().hbm_words_written == expected));
        }
        Ok(())
    }

    fn router_backward(&mut self) -> Result<(), CliError> {
        let seed = self.cfg.seed;
        let mut rng = Rng::new(seed).fork(11);
        let ne = self.cfg.model.n_experts.min(12);
        let k = self.cfg.model.k.min(ne);
        let (t, nh, dh) = (5, 2, 4);
        let x: Tensor<f64> = rng.normal_tensor(&[1, t, nh, dh], 1.0);
        let mut p: RouterParams<f64> = RouterParams::init(&mut rng, nh, dh, ne, 0.7);
        p.bias = rng.normal_tensor(&[nh, ne], 0.1);
        let fwd = route_naive(&x, &p, k, &mut Arena::unbounded("f"))?;
        let cot: Tensor<f64> = rng.normal_tensor(fwd.scores.shape(), 1.0);
        let (dx, dw) = route_ioaware_bwd(&x, &p, &fwd, &cot, 2, &mut Arena::unbounded("b"))?;

        // Loss with the selection frozen at the unperturbed point.
        let idx = fwd.indices.data().to_vec();
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            let mut acc = 0.0;
            for row in 0..t * nh {
                let h = row % nh;
                for j in 0..k {
                    let e = idx[row * k + j] as usize;
                    let s: f64 = (0..dh).map(|c| x.data()[row * dh + c] * w.data()[(h * dh + c) * ne + e]).sum();
                    acc += cot.data()[row * k + j] * s;
                }
            }
            acc
        };
        let fd_x = finite_diff_grad(|x| loss(x, &p.w_r), &x, 1e-6);
        let fd_w = finite_diff_grad(|w| loss(&x, w), &p.w_r, 1e-6);
        let e = grad_rel_err(dx.data(), fd_x.data(), 1e-8).max(grad_rel_err(dw.data(), fd_w.data(), 1e-8));
        self.push(Check::within("router", "backward_finite_difference", seed, e, 1e-4));

        // Dense oracle: scatter the cotangent into a zero [rows, N_e] matrix.
        let mut dense = vec![0.0; t * nh * ne];
        for row in 0..t * nh {
            for j in 0..k {
                dense[row * ne + idx[row * k + j] as usize] += cot.data()[row * k + j];
            }
        }
        let mut dw_ref = vec![0.0; nh * dh * ne];
        let mut dx_ref = vec![0.0; t * nh * dh];
        for row in 0..t * nh {
            let h = row % nh;
            for c in 0..dh {
                for e in 0..ne {
                    dw_ref[(h * dh + c) * ne + e] += x.data()[row * dh + c] * dense[row * ne + e];
                    dx_ref[row * dh + c] += dense[row * ne + e] * p.w_r.data()[(h * dh + c) * ne + e];
                }
            }
        }
        let e = rel_err(dw.data(), &dw_ref).max(rel_err(dx.data(), &dx_ref));
        self.push(Check::within("router", "backward_dense_oracle", seed, e, 1e-5));

        let mut zero_ok = true;
        for h in 0..nh {
            for e in 0..ne {
                let used = (0..t).any(|ti| idx[(ti * nh + h) * k..(ti * nh + h + 1) * k].contains(&(e as u32)));
                if !used {
                    zero_ok &= (0..dh).all(|c| dw.data()[(h * dh + c) * ne + e] == 0.0);
                }
            }
        }
        self.push(Check::holds("router", "backward_unselected_columns_zero", seed, zero_ok));
        Ok(())
    }

    fn experts_forward(&mut self) -> Result<(), CliError> {
        let m = &self.cfg.model;
        let seed = self.cfg.seed;
        let mut rng = Rng::new(seed).fork(12);
        let n = m.tokens();
        let idx = distinct_assignments(&mut rng, n, m.k, m.n_experts)?;
        let plan = build_cluster_plan(&idx, m.k, m.n_experts)?;
        let bank: ExpertBank<f32> = ExpertBank::init(&mut rng, m.n_experts, m.d_e, m.d_h, 1.0 / (m.d_h as f64).sqrt());
        let x: Vec<f32> = rng.normal_vec(n * m.d_h, 1.0);
        let xc = Tensor::from_vec(&[n * m.k, m.d_h], plan.permute_tokens(&x, m.d_h))?;
        let tiles = self.cfg.exec().tiles;
        let naive = experts_naive(&xc, &plan, &bank, tiles, &mut arena(self.cfg, "experts_naive")?)?;
        let mut a = arena(self.cfg, "experts_blocksparse")?;
        let mut bs = experts_blocksparse(&xc, &plan, &bank, tiles, &mut a)?;
        if self.fault {
            let scale = naive.max_abs() as f64;
            bs.data_mut()[0] += (FAULT_SIZE * scale) as f32;
        }
        self.push(Check::within("experts", "blocksparse_vs_grouped", seed, rel_err(bs.data(), naive.data()), 1e-5));
        // Only O' and log l may live in HBM between kernels, never the hidden activations.
        let bound = (n * m.k * (m.d_h + 1)) as u64;
        self.push(Check::holds("experts", "blocksparse_activation_peak_bound", seed, a.ledger().hbm_intermediate_peak_words <= bound));
        Ok(())
    }

    fn recovery_identity(&mut self) -> Result<(), CliError> {
        let seed = self.cfg.seed;
        let mut rng = Rng::new(seed).fork(13);
        let (ne, dh, n) = (3, self.cfg.model.d_h.min(16), 24);
        let bank: ExpertBank<f64> = ExpertBank::init(&mut rng, ne, 1, dh, 0.8);
        let idx: Vec<u32> = (0..n).map(|_| rng.below(ne) as u32).collect();
        let plan = build_cluster_plan(&idx, 1, ne)?;
        let xc: Tensor<f64> = Tensor::from_vec(&[n, dh], plan.permute_tokens(&rng.normal_vec::<f64>(n * dh, 1.0), dh))?;
        let tiles = ExpertTiles { row_block: 5, col_block: 1 };
        let st = blocksparse_attention(&xc, &plan, &bank, tiles, &mut Arena::unbounded("attn"))?;
        let mut err = 0.0f64;
        for p in 0..n {
            let e = plan.expert_of(p);
            let w = &bank.w_in.data()[e * dh..(e + 1) * dh];
            let v = &bank.w_out.data()[e * dh..(e + 1) * dh];
            let s: f64 = (0..dh).map(|c| xc.data()[p * dh + c] * w[c]).sum();
            let l = st.log_l[p].exp();
            for c in 0..dh {
                let recovered = st.o_prime.data()[p * dh + c] * l - v[c];
                err = err.max((recovered - gelu_scalar(s) * v[c]).abs());
            }
        }
        self.push(Check::within("experts", "recovery_identity_d_e1", seed, err, 1e-12));
        Ok(())
    }

    fn experts_backward(&mut self) -> Result<(), CliError> {
        let seed = self.cfg.seed;
        let mut rng = Rng::new(seed).fork(14);
        let (ne, de, dh, n, k) = (4, 6, 4, 5, 2);
        let idx = distinct_assignments(&mut rng, n, k, ne)?;
        let plan = build_cluster_plan(&idx, k, ne)?;
        let bank: ExpertBank<f64> = ExpertBank::init(&mut rng, ne, de, dh, 0.6);
        let xc: Tensor<f64> = rng.normal_tensor(&[n * k, dh], 1.0);
        let dy: Tensor<f64> = rng.normal_tensor(&[n * k, dh], 1.0);
        let tiles = ExpertTiles { row_block: 3, col_block: 4 };
        let loss = |x: &Tensor<f64>, b: &ExpertBank<f64>| -> f64 {
            let y = experts_naive(x, &plan, b, tiles, &mut Arena::unbounded("f")).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        let (dx, dwi, dwo) = experts_backward(&xc, &plan, &bank, &dy, tiles, &mut Arena::unbounded("b"))?;
        let fx = finite_diff_grad(|x| loss(x, &bank), &xc, 1e-6);
        let fi = finite_diff_grad(|w| loss(&xc, &ExpertBank { w_in: w.clone(), w_out: bank.w_out.clone() }), &bank.w_in, 1e-6);
        let fo = finite_diff_grad(|w| loss(&xc, &ExpertBank { w_in: bank.w_in.clone(), w_out: w.clone() }), &bank.w_out, 1e-6);
        let e = grad_rel_err(dx.data(), fx.data(), 1e-8)
            .max(grad_rel_err(dwi.data(), fi.data(), 1e-8))
            .max(grad_rel_err(dwo.data(), fo.data(), 1e-8));
        self.push(Check::within("experts", "backward_finite_difference", seed, e, 1e-4));
        Ok(())
    }

    fn layer_params(&self, rng: &mut Rng, dims: &LayerDims) -> Result<MHLatentMoEParams<f32>, CliError> {
        let mut p: MHLatentMoEParams<f32> = MHLatentMoEParams::init(rng, dims)?;
        p.w_in = rng.normal_tensor(p.w_in.shape(), 1.0 / (dims.d as f64).sqrt());
        p.w_out = rng.normal_tensor(p.w_out.shape(), 1.0 / (dims.d as f64).sqrt());
        for h in &mut p.heads {
            h.router.w_r = rng.normal_tensor(h.router.w_r.shape(), 1.0 / (dims.d_h as f64).sqrt());
            h.bank.w_in = rng.normal_tensor(h.bank.w_in.shape(), 1.0 / (dims.d_h as f64).sqrt());
            h.bank.w_out = rng.normal_tensor(h.bank.w_out.shape(), 1.0 / (dims.d_e as f64).sqrt());
        }
        Ok(p)
    }

    /// The layer against an explicit split / per-head / concat composition
    /// using the naive router and grouped experts.
    fn layer_reference(&mut self) -> Result<(), CliError> {
        let m = &self.cfg.model;
        let seed = self.cfg.seed;
        let mut rng = Rng::new(seed).fork(15);
        let dims = m.dims();
        let p = self.layer_params(&mut rng, &dims)?;
        let x: Tensor<f32> = rng.normal_tensor(&[m.batch, m.seq_len, m.d], 1.0);
        let out = mh_latentmoe_forward(&p, &x, &self.cfg.exec(), &mut Arena::unbounded("layer"))?;

        let n = m.tokens();
        let (nh, dh, dp) = (m.n_heads, m.d_h, p.w_in.shape()[0]);
        let mut z = vec![0.0f32; n * dp];
        matmul_nt_into(x.data(), p.w_in.data(), &mut z, n, m.d, dp);
        let reference = ExecConfig { router: RouterMode::Naive, backend: ExpertBackend::Grouped, ..self.cfg.exec() };
        let mut y = vec![0.0f32; n * nh * dh];
        for (i, head) in p.heads.iter().enumerate() {
            let cols = |off: usize| -> Vec<f32> { (0..n).flat_map(|t| z[t * dp + off..t * dp + off + dh].to_vec()).collect() };
            let xi = Tensor::from_vec(&[n, dh], cols(i * dh))?;
            let oi = if dims.separate_routing {
                let ri = Tensor::from_vec(&[n, dh], cols((nh + i) * dh))?;
                latentmoe::layer::moe_forward_cached(head, &xi, &ri, &reference, &mut Arena::unbounded("ref"))?.0
            } else {
                moe_forward(head, &xi, &reference, &mut Arena::unbounded("ref"))?
            };
            for t in 0..n {
                y[t * nh * dh + i * dh..t * nh * dh + (i + 1) * dh].copy_from_slice(&oi.data()[t * dh..(t + 1) * dh]);
            }
        }
        let mut o = vec![0.0f32; n * m.d];
        matmul_nt_into(&y, p.w_out.data(), &mut o, n, nh * dh, m.d);
        self.push(Check::within("layer", "per_head_reference", seed, rel_err(out.data(), &o), 1e-5));
        Ok(())
    }

    fn layer_gradients(&mut self) -> Result<(), CliError> {
        let seed = self.cfg.seed;
        let mut rng = Rng::new(seed).fork(16);
        let dims = LayerDims {
            d: 6,
            n_heads: 2,
            d_h: 3,
            n_experts: 4,
            k: 2,
            d_e: 4,
            n_layers: 12,
            separate_routing: self.cfg.model.separate_routing,
        };
        let p = self.layer_params(&mut rng, &dims)?.cast::<f64>();
        let x: Tensor<f64> = rng.normal_tensor(&[1, 4, 6], 1.0);
        let exec = ExecConfig { route_blocks: RouteBlocks { block_n: 2, block_m: 2 }, ..self.cfg.exec() };
        let loss = |p: &MHLatentMoEParams<f64>, x: &Tensor<f64>| -> f64 {
            let o = mh_latentmoe_forward(p, x, &exec, &mut Arena::unbounded("f")).unwrap();
            o.data().iter().map(|v| v * v).sum()
        };
        let (o, cache) = mh_latentmoe_forward_cached(&p, &x, &exec, &mut Arena::unbounded("f"))?;
        let g = mh_latentmoe_backward_cached(&p, &cache, &o.map(|v| 2.0 * v), &exec, &mut Arena::unbounded("b"))?;
        let fx = finite_diff_grad(|x| loss(&p, x), &x, 1e-6);
        let fi = finite_diff_grad(|w| loss(&MHLatentMoEParams { w_in: w.clone(), ..p.clone() }, &x), &p.w_in, 1e-6);
        let e = grad_rel_err(g.x.data(), fx.data(), 1e-8).max(grad_rel_err(g.w_in.data(), fi.data(), 1e-8));
        self.push(Check::within("layer", "backward_finite_difference", seed, e, 1e-4));
        Ok(())
    }

    fn parallel(&mut self) -> Result<(), CliError> {
        let m = &self.cfg.model;
        let seed = self.cfg.seed;
        let pw = self.cfg.parallel.workers;
        let ws = self.cfg.parallel.word_size;
        let mut rng = Rng::new(seed).fork(17);
        let dims = m.dims();
        let exec = self.cfg.exec();
        let p = self.layer_params(&mut rng, &dims)?;
        let x: Tensor<f32> = rng.normal_tensor(&[m.batch, m.seq_len, m.d], 1.0);
        let single = mh_latentmoe_forward(&p, &x, &exec, &mut Arena::unbounded("single"))?;
        let mut group = WorkerGroup::new(pw, ws)?;
        let (hp, hp_report) = hp_schedule(&mut group, &x, &p, &exec)?;
        self.push(Check::within("parallel", "hp_matches_single_worker", seed, max_abs_diff(hp.data(), single.data()), 1e-6));
        self.push(Check::holds("parallel", "hp_rounds_eq_2", seed, hp_report.n_rounds() == 2));

        let module: &MoEModule<f32> = &p.heads[0];
        let xe: Tensor<f32> = rng.normal_tensor(&[m.tokens(), m.d_h], 1.0);
        let single = moe_forward(module, &xe, &exec, &mut Arena::unbounded("single"))?;
        let mut group = WorkerGroup::new(pw, ws)?;
        let (ep, ep_report) = ep_schedule(&mut group, &xe, module, EpAssignment::Router, &exec, self.cfg.parallel.skew)?;
        self.push(Check::within("parallel", "ep_matches_single_worker", seed, max_abs_diff(ep.data(), single.data()), 1e-6));
        self.push(Check::holds("parallel", "ep_rounds_eq_3", seed, ep_report.n_rounds() == 3));

        let n = m.tokens();
        let hp = hp_traffic(&mut WorkerGroup::new(pw, ws)?, n, m.n_heads, m.d_h, m.k)?;
        let idx = zipf_assign(&SkewModel::new(self.cfg.parallel.skew, m.n_experts, pw)?, n, m.k, &mut rng)?;
        let ep = ep_traffic(&mut WorkerGroup::new(pw, ws)?, &idx, m.k, m.n_experts, m.d, self.cfg.parallel.skew)?;
        self.push(Check::holds(
            "parallel",
            "ep_hp_dispatch_ratio_eq_k",
            seed,
            ep.dispatch_bytes() == m.k as u64 * hp.dispatch_bytes(),
        ));
        Ok(())
    }
}
