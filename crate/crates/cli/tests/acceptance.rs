//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use latentmoe::experts::{blocksparse_attention, build_cluster_plan, experts_blocksparse, experts_naive, ExpertBank, ExpertTiles};
use latentmoe::gradcheck::finite_diff_grad;
use latentmoe::layer::{mh_latentmoe_forward, moe_forward, ExecConfig, LayerDims, MHLatentMoEParams, MoEModule, RouterMode};
use latentmoe::memory::{Arena, TierConfig};
use latentmoe::parallel::{ep_schedule, ep_traffic, hp_schedule, hp_traffic, zipf_assign, EpAssignment, SkewModel, WorkerGroup};
use latentmoe::router::{route_ioaware_bwd, route_ioaware_fwd, route_naive, RouteBlocks, RouterParams};
use latentmoe::tensor::Tensor;
use latentmoe::train::{train_toy, TrainConfig};
use latentmoe::{ExpertBackend, Rng};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    max_abs(a, b) / scale.max(f64::MIN_POSITIVE)
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// erf from its Taylor series (|x| < 3) or the continued fraction of erfc.
fn erf(x: f64) -> f64 {
    let a = x.abs();
    let r = if a < 3.0 {
        let mut term = a;
        let mut sum = a;
        let x2 = a * a;
        for n in 1..200 {
            term *= -x2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // erfc(a) = exp(-a²)/√π · 1/(a + 1/2/(a + 1/(a + 3/2/(a + …))))
        let mut f = a;
        for n in (1..60).rev() {
            f = a + (n as f64 / 2.0) / f;
        }
        1.0 - (-a * a).exp() / std::f64::consts::PI.sqrt() / f
    };
    r.copysign(x)
}

fn distinct(rng: &mut Rng, n: usize, k: usize, ne: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        let mut row: Vec<u32> = Vec::with_capacity(k);
        while row.len() < k {
            let c = rng.below(ne) as u32;
            if !row.contains(&c) {
                row.push(c);
            }
        }
        out.extend(row);
    }
    out
}

// 1. IO-aware forward routing equals the naive router.
fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = Rng::new(2024);
    let mut instances = Vec::new();
    instances.push((4, 512, 8, 128, 512, 8));
    instances.push((1, 1, 1, 1, 1, 1));
    instances.push((2, 37, 3, 5, 8, 8));
    while instances.len() < 120 {
        let k = [1, 4, 8][rng.below(3)];
        let (b, t, nh, dh, ne) = (rng.range(1, 4), rng.range(1, 512), rng.range(1, 8), rng.range(1, 128), rng.range(k, 512));
        if b * t * nh * dh * ne <= 4_000_000 {
            instances.push((b, t, nh, dh, ne, k));
        }
    }
    let mut worst = 0.0f64;
    let mut comparisons = 0;
    for (i, &(b, t, nh, dh, ne, k)) in instances.iter().enumerate() {
        let mut r = Rng::new(i as u64);
        let x: Tensor<f32> = r.normal_tensor(&[b, t, nh, dh], 1.0);
        let mut p: RouterParams<f32> = RouterParams::init(&mut r, nh, dh, ne, 1.0);
        p.bias = r.normal_tensor(&[nh, ne], 0.5);
        let naive = route_naive(&x, &p, k, &mut Arena::unbounded("naive")).map_err(e)?;
        for bm in [1, k, 16, 64, ne] {
            let bn = [1, 16, 64][i % 3];
            let io = route_ioaware_fwd(&x, &p, k, RouteBlocks { block_n: bn, block_m: bm }, &mut Arena::unbounded("io"))
                .map_err(e)?;
            ensure(io.indices.data() == naive.indices.data(), || {
                format!("instance {i} {:?} block_m {bm}: indices differ", (b, t, nh, dh, ne, k))
            })?;
            let err = max_abs(&to64(io.scores.data()), &to64(naive.scores.data()));
            ensure(err <= 1e-6, || format!("instance {i} block_m {bm}: score error {err:e}"))?;
            worst = worst.max(err);
            comparisons += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{} instances, {comparisons} block configs, max score err {worst:e}, {secs:.1} s", instances.len()))
}

// 2. Routing backward against finite differences and a dense masked oracle.
fn criterion_2() -> Outcome {
    let (mut worst_fd, mut worst_dense, mut zero_cols) = (0.0f64, 0.0f64, 0usize);
    for seed in 0..12u64 {
        let mut r = Rng::new(500 + seed);
        let (b, t, nh, dh, ne, k) = (1 + (seed % 2) as usize, 4, 2, 3, 9, [1, 2, 4][seed as usize % 3]);
        let x: Tensor<f64> = r.normal_tensor(&[b, t, nh, dh], 1.0);
        let mut p: RouterParams<f64> = RouterParams::init(&mut r, nh, dh, ne, 1.0);
        p.bias = r.normal_tensor(&[nh, ne], 0.3);
        let fwd = route_naive(&x, &p, k, &mut Arena::unbounded("f")).map_err(e)?;
        let cot: Tensor<f64> = r.normal_tensor(fwd.scores.shape(), 1.0);
        let (dx, dw) = route_ioaware_bwd(&x, &p, &fwd, &cot, 3, &mut Arena::unbounded("b")).map_err(e)?;

        // The loss re-runs the router so selection changes would show up.
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            let q = RouterParams::new(w.clone(), p.bias.clone()).unwrap();
            let s = route_naive(x, &q, k, &mut Arena::unbounded("fd")).unwrap();
            s.scores.data().iter().zip(cot.data()).map(|(a, c)| a * c).sum()
        };
        let fx = finite_diff_grad(|x| loss(x, &p.w_r), &x, 1e-6);
        let fw = finite_diff_grad(|w| loss(&x, w), &p.w_r, 1e-6);
        worst_fd = worst_fd.max(rel(dx.data(), fx.data())).max(rel(dw.data(), fw.data()));

        let rows = b * t * nh;
        let mut dense = vec![0.0; rows * ne];
        let idx = fwd.indices.data();
        for row in 0..rows {
            for j in 0..k {
                dense[row * ne + idx[row * k + j] as usize] = cot.data()[row * k + j];
            }
        }
        let mut dw_ref = vec![0.0; nh * dh * ne];
        let mut dx_ref = vec![0.0; rows * dh];
        for row in 0..rows {
            let h = row % nh;
            for c in 0..dh {
                for ex in 0..ne {
                    let g = dense[row * ne + ex];
                    dw_ref[(h * dh + c) * ne + ex] += x.data()[row * dh + c] * g;
                    dx_ref[row * dh + c] += g * p.w_r.data()[(h * dh + c) * ne + ex];
                }
            }
        }
        worst_dense = worst_dense.max(rel(dw.data(), &dw_ref)).max(rel(dx.data(), &dx_ref));
        for h in 0..nh {
            for ex in 0..ne {
                let selected = (0..rows).filter(|row| row % nh == h).any(|row| idx[row * k..(row + 1) * k].contains(&(ex as u32)));
                if !selected {
                    zero_cols += 1;
                    for c in 0..dh {
                        let v = dw.data()[(h * dh + c) * ne + ex];
                        ensure(v.to_bits() == 0, || format!("seed {seed}: unselected column {ex} of head {h} holds {v}"))?;
                    }
                }
            }
        }
    }
    ensure(worst_fd < 1e-4, || format!("finite-difference rel err {worst_fd:e}"))?;
    ensure(worst_dense < 1e-5, || format!("dense oracle rel err {worst_dense:e}"))?;
    ensure(zero_cols > 0, || "no unselected columns exercised".into())?;
    Ok(format!("fd rel err {worst_fd:.2e}, dense oracle rel err {worst_dense:.2e}, {zero_cols} unselected columns exactly zero"))
}

// 3. Block-sparse attention backend equals grouped GEMM; recovery identity.
fn criterion_3() -> Outcome {
    let dh = 16;
    let mut worst = 0.0f64;
    let mut shapes = 0;
    for t in [64, 512] {
        for ne in [8, 64, 384] {
            for de in [32, 128, 256] {
                for k in [1, 4, 8] {
                    let mut r = Rng::new((t * 1_000_000 + ne * 1000 + de * 10 + k) as u64);
                    let idx = distinct(&mut r, t, k, ne);
                    let plan = build_cluster_plan(&idx, k, ne).map_err(e)?;
                    let bank: ExpertBank<f32> = ExpertBank::init(&mut r, ne, de, dh, 0.25);
                    let x: Vec<f32> = r.normal_vec(t * dh, 1.0);
                    let xc = Tensor::from_vec(&[t * k, dh], plan.permute_tokens(&x, dh)).map_err(e)?;
                    let tiles = ExpertTiles::default();
                    let a = experts_naive(&xc, &plan, &bank, tiles, &mut Arena::unbounded("n")).map_err(e)?;
                    let b = experts_blocksparse(&xc, &plan, &bank, tiles, &mut Arena::unbounded("b")).map_err(e)?;
                    let err = rel(&to64(b.data()), &to64(a.data()));
                    ensure(err <= 1e-5, || format!("T={t} N_e={ne} d_e={de} k={k}: rel err {err:e}"))?;
                    worst = worst.max(err);
                    shapes += 1;
                }
            }
        }
    }
    // d_e = 1: one key per expert, so O'·ℓ − V must equal gelu(s)·V.
    let mut worst_id = 0.0f64;
    for seed in 0..6u64 {
        let mut r = Rng::new(900 + seed);
        let (ne, n, dhh) = (1 + seed as usize, 20, 7);
        let bank: ExpertBank<f64> = ExpertBank::init(&mut r, ne, 1, dhh, 0.9);
        let idx: Vec<u32> = (0..n).map(|_| r.below(ne) as u32).collect();
        let plan = build_cluster_plan(&idx, 1, ne).map_err(e)?;
        let xc: Tensor<f64> = r.normal_tensor(&[n, dhh], 1.0);
        let tiles = ExpertTiles { row_block: 3, col_block: 1 };
        let st = blocksparse_attention(&xc, &plan, &bank, tiles, &mut Arena::unbounded("a")).map_err(e)?;
        let out = experts_blocksparse(&xc, &plan, &bank, tiles, &mut Arena::unbounded("o")).map_err(e)?;
        for p in 0..n {
            let ex = plan.expert_of(p);
            let w = &bank.w_in.data()[ex * dhh..(ex + 1) * dhh];
            let v = &bank.w_out.data()[ex * dhh..(ex + 1) * dhh];
            let s: f64 = (0..dhh).map(|c| xc.data()[p * dhh + c] * w[c]).sum();
            let ell = st.log_l[p].exp();
            worst_id = worst_id.max((ell - (gelu(s) + 1.0)).abs() / ell);
            for c in 0..dhh {
                let want = gelu(s) * v[c];
                worst_id = worst_id.max((st.o_prime.data()[p * dhh + c] * ell - v[c] - want).abs());
                worst_id = worst_id.max((out.data()[p * dhh + c] - want).abs());
            }
        }
    }
    ensure(worst_id < 1e-13, || format!("recovery identity error {worst_id:e}"))?;
    Ok(format!("{shapes} shapes, max rel err {worst:.2e}; d_e=1 identity err {worst_id:.1e}"))
}

// 4. Traffic scaling of routing and expert computation.
fn criterion_4() -> Outcome {
    let tier = TierConfig::with_capacity(131_072).map_err(e)?;
    let (t, dh, k) = (2048, 64, 4);
    let mut r = Rng::new(4);
    let x: Tensor<f32> = r.normal_tensor(&[1, t, 1, dh], 1.0);
    let mut reads = Vec::new();
    for ne in [256, 512] {
        let p: RouterParams<f32> = RouterParams::init(&mut r, 1, dh, ne, 0.125);
        let mut a = Arena::new(tier, "naive");
        route_naive(&x, &p, k, &mut a).map_err(e)?;
        let mut b = Arena::new(tier, "io");
        route_ioaware_fwd(&x, &p, k, RouteBlocks { block_n: 512, block_m: 32 }, &mut b).map_err(e)?;
        reads.push((a.ledger().hbm_words_read as f64, b.ledger().hbm_words_read as f64));
    }
    let naive = reads[1].0 / reads[0].0;
    let io = reads[1].1 / reads[0].1;
    ensure(naive >= 1.9, || format!("naive read ratio {naive:.3}"))?;
    ensure(io <= 1.35, || format!("io-aware read ratio {io:.3}"))?;

    let (n, ne) = (512, 64);
    let idx = distinct(&mut r, n, k, ne);
    let plan = build_cluster_plan(&idx, k, ne).map_err(e)?;
    let xt: Vec<f32> = r.normal_vec(n * dh, 1.0);
    let xc = Tensor::from_vec(&[n * k, dh], plan.permute_tokens(&xt, dh)).map_err(e)?;
    let mut act = Vec::new();
    for de in [64, 128] {
        let bank: ExpertBank<f32> = ExpertBank::init(&mut r, ne, de, dh, 0.1);
        let mut a = Arena::new(tier, "grouped");
        experts_naive(&xc, &plan, &bank, ExpertTiles::default(), &mut a).map_err(e)?;
        let mut b = Arena::new(tier, "bs");
        experts_blocksparse(&xc, &plan, &bank, ExpertTiles::default(), &mut b).map_err(e)?;
        act.push((a.ledger().intermediate_traffic() as f64, b.ledger().hbm_intermediate_peak_words));
    }
    let grouped = act[1].0 / act[0].0;
    ensure(grouped >= 1.9, || format!("grouped activation ratio {grouped:.3}"))?;
    ensure(act[0].1 == act[1].1, || format!("block-sparse peak {} -> {}", act[0].1, act[1].1))?;
    Ok(format!(
        "N_e 256->512: naive reads x{naive:.3}, io-aware x{io:.3}; d_e 64->128: grouped activations x{grouped:.3}, block-sparse peak {} words both",
        act[0].1
    ))
}

// 5. Dispatch volume EP/HP equals k.
fn criterion_5() -> Outcome {
    let (n, nh, dh, ne, p, ws) = (1024, 8, 64, 64, 4, 4);
    let d = nh * dh;
    let mut notes = Vec::new();
    for k in [1, 2, 4, 8] {
        let hp = hp_traffic(&mut WorkerGroup::new(p, ws).map_err(e)?, n, nh, dh, k).map_err(e)?;
        let idx = zipf_assign(&SkewModel::new(1.0, ne, p).map_err(e)?, n, k, &mut Rng::new(k as u64)).map_err(e)?;
        let ep = ep_traffic(&mut WorkerGroup::new(p, ws).map_err(e)?, &idx, k, ne, d, 1.0).map_err(e)?;
        // Closed forms: every token ships d words once under HP and k times under EP.
        ensure(hp.dispatch_bytes() == (n * d * ws) as u64, || format!("k={k}: HP dispatch {}", hp.dispatch_bytes()))?;
        ensure(ep.dispatch_bytes() == (n * k * d * ws) as u64, || format!("k={k}: EP dispatch {}", ep.dispatch_bytes()))?;
        ensure(ep.dispatch_bytes() == k as u64 * hp.dispatch_bytes(), || format!("k={k}: ratio not exact"))?;
        let per_worker = (n / p * (nh / p) * dh * (p - 1) * ws) as u64;
        let sent = hp.rounds[0].sent_words.iter().map(|w| w * ws as u64).collect::<Vec<_>>();
        ensure(sent.iter().all(|&s| s == per_worker), || format!("k={k}: HP per-worker bytes {sent:?} vs {per_worker}"))?;
        if k == 4 {
            let ratio = hp.dispatch_bytes() as f64 / ep.dispatch_bytes() as f64;
            ensure(ratio == 0.25, || format!("HP/EP at k=4 is {ratio}"))?;
        }
        notes.push(format!("k={k}:{}", ep.dispatch_bytes() / hp.dispatch_bytes()));
    }
    Ok(format!("EP/HP dispatch ratios {}; HP/EP = 0.25 at k=4", notes.join(" ")))
}

fn harmonic(n: usize, s: f64) -> f64 {
    (1..=n).map(|i| (i as f64).powf(-s)).sum()
}

// 6. Zipf imbalance, latency trends and HP determinism.
fn criterion_6() -> Outcome {
    let (ne, p) = (768, 4);
    let mut shares = Vec::new();
    for (s, want, tol) in [(1.0, 0.808, 0.005), (2.0, 0.998, 0.001)] {
        let oracle = harmonic(ne / p, s) / harmonic(ne, s);
        ensure((oracle - want).abs() <= tol, || format!("harmonic oracle at s={s}: {oracle}"))?;
        let model = SkewModel::new(s, ne, p).map_err(e)?;
        ensure((model.worker_share(0) - oracle).abs() < 1e-12, || format!("model share at s={s}"))?;
        let idx = zipf_assign(&model, 200_000, 1, &mut Rng::new(60)).map_err(e)?;
        let frac = idx.iter().filter(|&&x| (x as usize) < ne / p).count() as f64 / idx.len() as f64;
        ensure((frac - want).abs() <= tol, || format!("simulated worker-0 share at s={s}: {frac}"))?;
        shares.push(frac);
    }

    let (n, d) = (2048, 64);
    let skews = [0.0, 0.5, 1.0, 1.5, 2.0];
    let ks = [1, 2, 4, 8];
    let mut lat = vec![vec![0.0; skews.len()]; ks.len()];
    for (ki, &k) in ks.iter().enumerate() {
        for (si, &s) in skews.iter().enumerate() {
            let idx = zipf_assign(&SkewModel::new(s, ne, p).map_err(e)?, n, k, &mut Rng::new(61)).map_err(e)?;
            let rep = ep_traffic(&mut WorkerGroup::new(p, 4).map_err(e)?, &idx, k, ne, d, s).map_err(e)?;
            lat[ki][si] = rep.latency_proxy;
        }
    }
    for (ki, row) in lat.iter().enumerate() {
        ensure(row.windows(2).all(|w| w[1] > w[0]), || format!("EP latency not increasing in skew at k={}: {row:?}", ks[ki]))?;
    }
    for si in 0..skews.len() {
        let col: Vec<f64> = lat.iter().map(|r| r[si]).collect();
        ensure(col.windows(2).all(|w| w[1] > w[0]), || format!("EP latency not increasing in k at s={}: {col:?}", skews[si]))?;
    }

    let dims = LayerDims { d: 32, n_heads: 4, d_h: 8, n_experts: 16, k: 2, d_e: 8, n_layers: 12, separate_routing: false };
    let mut first = None;
    for seed in 0..20u64 {
        let mut r = Rng::new(7000 + seed);
        let layer: MHLatentMoEParams<f32> = MHLatentMoEParams::init(&mut r, &dims).map_err(e)?;
        let x: Tensor<f32> = r.normal_tensor(&[2, 16, 32], 1.0);
        let (_, rep) = hp_schedule(&mut WorkerGroup::new(p, 4).map_err(e)?, &x, &layer, &ExecConfig::default()).map_err(e)?;
        let key = (rep.latency_proxy.to_bits(), rep.workers.clone());
        match &first {
            None => first = Some(key),
            Some(f) => ensure(*f == key, || format!("HP report differs at routing seed {seed}"))?,
        }
    }
    Ok(format!(
        "worker-0 share {:.2}% (s=1), {:.2}% (s=2); EP latency increasing over {} skews x {} k; HP report identical over 20 seeds",
        100.0 * shares[0],
        100.0 * shares[1],
        skews.len(),
        ks.len()
    ))
}

// 7. HP and EP outputs equal single-worker execution.
fn criterion_7() -> Outcome {
    let mut worst = 0.0f64;
    for (ci, &(p, backend)) in [(1, ExpertBackend::BlockSparse), (2, ExpertBackend::Grouped), (4, ExpertBackend::BlockSparse), (4, ExpertBackend::Grouped)]
        .iter()
        .enumerate()
    {
        let exec = ExecConfig::default().with_backend(backend);
        let mut r = Rng::new(70 + ci as u64);
        let dims = LayerDims { d: 64, n_heads: 8, d_h: 8, n_experts: 16, k: 4, d_e: 16, n_layers: 12, separate_routing: false };
        let mut layer: MHLatentMoEParams<f32> = MHLatentMoEParams::init(&mut r, &dims).map_err(e)?;
        layer.w_out = r.normal_tensor(layer.w_out.shape(), 0.125);
        let x: Tensor<f32> = r.normal_tensor(&[2, 33, 64], 1.0);
        let single = mh_latentmoe_forward(&layer, &x, &exec, &mut Arena::unbounded("s")).map_err(e)?;
        let (hp, rep) = hp_schedule(&mut WorkerGroup::new(p, 4).map_err(e)?, &x, &layer, &exec).map_err(e)?;
        ensure(rep.n_rounds() == 2, || format!("HP rounds {}", rep.n_rounds()))?;
        let err = max_abs(&to64(hp.data()), &to64(single.data()));
        ensure(err <= 1e-6, || format!("HP P={p}: {err:e}"))?;
        worst = worst.max(err);

        let module: MoEModule<f32> = MoEModule::init(&mut r, 8, 16, 16, 4, 0.4).map_err(e)?;
        let xe: Tensor<f32> = r.normal_tensor(&[66, 8], 1.0);
        let single = moe_forward(&module, &xe, &exec, &mut Arena::unbounded("s")).map_err(e)?;
        let (ep, rep) = ep_schedule(&mut WorkerGroup::new(p, 4).map_err(e)?, &xe, &module, EpAssignment::Router, &exec, 0.0)
            .map_err(e)?;
        ensure(rep.n_rounds() == 3, || format!("EP rounds {}", rep.n_rounds()))?;
        let err = max_abs(&to64(ep.data()), &to64(single.data()));
        ensure(err <= 1e-6, || format!("EP P={p}: {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("max abs err {worst:e} over P in {{1,2,4}} and both backends; rounds HP=2, EP=3"))
}

// 8. Toy training sanity.
fn criterion_8() -> Outcome {
    let dims = LayerDims { d: 32, n_heads: 4, d_h: 8, n_experts: 16, k: 2, d_e: 16, n_layers: 12, separate_routing: false };
    let cfg = TrainConfig::default();
    ensure(cfg.steps == 200, || "default run length changed".into())?;
    let mut notes = Vec::new();
    for seed in 0..3u64 {
        let bs = ExecConfig::default();
        let grouped = bs.with_backend(ExpertBackend::Grouped);
        let (a, _) = train_toy::<f64>("block-sparse", &dims, &cfg, &bs, seed).map_err(e)?;
        let (b, _) = train_toy::<f64>("grouped", &dims, &cfg, &grouped, seed).map_err(e)?;
        let diff = max_abs(&a.losses(), &b.losses());
        ensure(diff <= 1e-4, || format!("seed {seed}: backend loss diff {diff:e}"))?;
        let l = a.losses();
        ensure(l[199] < l[0], || format!("seed {seed}: loss {} -> {}", l[0], l[199]))?;
        let head = l[..20].iter().sum::<f64>() / 20.0;
        ensure(a.losses()[180..].iter().sum::<f64>() / 20.0 < head, || format!("seed {seed}: late losses not below early"))?;
        let off = TrainConfig { balance_rate: 0.0, ..cfg.clone() };
        let (c, _) = train_toy::<f64>("no-balance", &dims, &off, &bs, seed).map_err(e)?;
        let (r0, r1) = (a.records[0].balance_ratio, a.records[199].balance_ratio);
        ensure(r1 < r0, || format!("seed {seed}: balance ratio {r0} -> {r1}"))?;
        let (on, free) = (a.tail_balance(20), c.tail_balance(20));
        ensure(on < free, || format!("seed {seed}: late balance {on} with updater vs {free} without"))?;
        notes.push(format!("seed {seed}: loss {:.3}->{:.3}, ratio {r0:.2}->{r1:.2} (no updater {free:.2}), diff {diff:.0e}", l[0], l[199]));
    }
    let (naive_ref, _) = train_toy::<f64>(
        "reference",
        &dims,
        &TrainConfig { steps: 50, ..cfg.clone() },
        &ExecConfig::default().with_router(RouterMode::Naive).with_backend(ExpertBackend::Grouped),
        0,
    )
    .map_err(e)?;
    let (bs50, _) = train_toy::<f64>("bs", &dims, &TrainConfig { steps: 50, ..cfg }, &ExecConfig::default(), 0).map_err(e)?;
    let d = max_abs(&naive_ref.losses(), &bs50.losses());
    ensure(d <= 1e-4, || format!("reference run differs by {d:e}"))?;
    Ok(notes.join("; "))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|f| f.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

// 9. CLI runs are bitwise reproducible.
fn criterion_9() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_latentmoe");
    let root = tempfile::tempdir().map_err(e)?;
    let mut compared = 0;
    for verb in ["verify", "sweep-comm", "sweep-io", "train-toy"] {
        let mut snaps = Vec::new();
        for run in 0..2 {
            let out = root.path().join(format!("{verb}-{run}"));
            let status = Command::new(bin)
                .args([verb, "--preset", "toy", "--set", "seed=3", "--out", out.to_str().unwrap()])
                .output()
                .map_err(e)?;
            ensure(status.status.success(), || format!("{verb} exited with {:?}", status.status.code()))?;
            let report = Command::new(bin).args(["report", out.to_str().unwrap()]).output().map_err(e)?;
            ensure(report.status.success(), || format!("report on {verb} failed"))?;
            let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).map_err(e)?).map_err(e)?;
            snaps.push((snapshot(&out), manifest["config_hash"].clone(), manifest["seed"].clone()));
        }
        ensure(snaps[0] == snaps[1], || format!("{verb}: outputs differ between runs"))?;
        compared += snaps[0].0.len();
    }
    Ok(format!("4 verbs run twice with report: {compared} files byte-identical"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("routing equivalence", criterion_1),
        ("routing backward", criterion_2),
        ("expert computation exactness", criterion_3),
        ("IO scaling", criterion_4),
        ("communication volume", criterion_5),
        ("load imbalance", criterion_6),
        ("parallel correctness", criterion_7),
        ("training sanity", criterion_8),
        ("determinism", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|a| *a == id || name.contains(a.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = f();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS criterion {id} ({name}): {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {msg} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
