//! Deterministic simulation of Head Parallel and Expert Parallel execution.
//!
//! Workers are sequential actors that only exchange data through
//! [`WorkerGroup::all_to_all`], which counts every word moved. Tokens are
//! sharded contiguously across workers before either schedule starts.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{aggregate_weighted, build_cluster_plan, run_experts, ExpertBank};
use crate::layer::{moe_forward_cached, ExecConfig, MHLatentMoEParams, MoEModule};
use crate::memory::Arena;
use crate::rng::Rng;
use crate::router::{gate_from_scores, route_ioaware_fwd, route_naive};
use crate::tensor::{matmul_nt_into, Scalar, Tensor};

pub const COMM_CSV_HEADER: &str =
    "schedule,P,k,skew,worker_id,bytes_sent,bytes_received,max_queue_tokens,rounds,latency_proxy,peak_payload_words";

/// Word counts of one all-to-all round, indexed by worker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundStats {
    pub label: String,
    /// Words sent to other workers.
    pub sent_words: Vec<u64>,
    /// Words received from other workers.
    pub received_words: Vec<u64>,
    /// Words a worker delivered to itself.
    pub self_words: Vec<u64>,
    /// Items (tokens or counters) received including self-delivery.
    pub received_items: Vec<u64>,
}

impl RoundStats {
    /// Total payload of the round including self-delivery.
    pub fn total_words(&self) -> u64 {
        self.sent_words.iter().sum::<u64>() + self.self_words.iter().sum::<u64>()
    }
}

/// `P` simulated workers connected all-to-all.
#[derive(Clone, Debug)]
pub struct WorkerGroup {
    p: usize,
    word_size: usize,
    rounds: Vec<RoundStats>,
    peak_payload: Vec<u64>,
}

impl WorkerGroup {
    pub fn new(p: usize, word_size: usize) -> Result<Self> {
        if p == 0 || word_size == 0 {
            return Err(Error::Config("worker count and word size must be positive".into()));
        }
        Ok(WorkerGroup { p, word_size, rounds: Vec::new(), peak_payload: vec![0; p] })
    }

    pub fn size(&self) -> usize {
        self.p
    }

    pub fn word_size(&self) -> usize {
        self.word_size
    }

    pub fn rounds(&self) -> &[RoundStats] {
        &self.rounds
    }

    /// `payloads[i][j]` goes from worker `i` to worker `j`. Each element
    /// counts as `words_per_element` words and `elements_per_item` elements
    /// form one token (or counter). Returns `received[j][i] = payloads[i][j]`.
    pub fn all_to_all<T>(
        &mut self,
        label: &str,
        payloads: Vec<Vec<Vec<T>>>,
        words_per_element: usize,
        elements_per_item: usize,
    ) -> Result<Vec<Vec<Vec<T>>>> {
        let p = self.p;
        if payloads.len() != p || payloads.iter().any(|row| row.len() != p) {
            return Err(Error::Shape(format!("all_to_all needs a {p}x{p} payload matrix")));
        }
        if elements_per_item == 0 {
            return Err(Error::InvalidParameter("elements_per_item must be >= 1".into()));
        }
        let wpi = words_per_element as u64;
        let mut stats = RoundStats {
            label: label.to_string(),
            sent_words: vec![0; p],
            received_words: vec![0; p],
            self_words: vec![0; p],
            received_items: vec![0; p],
        };
        let mut send_buf = vec![0u64; p];
        for (i, row) in payloads.iter().enumerate() {
            for (j, msg) in row.iter().enumerate() {
                let words = msg.len() as u64 * wpi;
                send_buf[i] += words;
                stats.received_items[j] += (msg.len() / elements_per_item) as u64;
                if i == j {
                    stats.self_words[i] += words;
                } else {
                    stats.sent_words[i] += words;
                    stats.received_words[j] += words;
                }
            }
        }
        for w in 0..p {
            let recv = stats.received_words[w] + stats.self_words[w];
            self.peak_payload[w] = self.peak_payload[w].max(send_buf[w] + recv);
        }
        self.rounds.push(stats);

        let mut received: Vec<Vec<Vec<T>>> = (0..p).map(|_| Vec::with_capacity(p)).collect();
        for row in payloads {
            for (j, msg) in row.into_iter().enumerate() {
                received[j].push(msg);
            }
        }
        Ok(received)
    }

    /// Summarizes the rounds executed so far and clears them.
    pub fn finish(&mut self, schedule: &str, k: usize, skew: f64, dispatch_round: usize) -> CommReport {
        let rounds = std::mem::take(&mut self.rounds);
        let peak = std::mem::replace(&mut self.peak_payload, vec![0; self.p]);
        let ws = self.word_size as u64;
        let workers = (0..self.p)
            .map(|w| WorkerComm {
                bytes_sent: rounds.iter().map(|r| r.sent_words[w]).sum::<u64>() * ws,
                bytes_received: rounds.iter().map(|r| r.received_words[w]).sum::<u64>() * ws,
                queue_tokens: rounds.get(dispatch_round).map_or(0, |r| r.received_items[w]),
                peak_payload_words: peak[w],
            })
            .collect::<Vec<_>>();
        let mut report = CommReport {
            schedule: schedule.to_string(),
            p: self.p,
            k,
            skew,
            word_size: self.word_size,
            max_queue_tokens: workers.iter().map(|w| w.queue_tokens).max().unwrap_or(0),
            dispatch_words: rounds.get(dispatch_round).map_or(0, |r| r.total_words()),
            workers,
            rounds,
            latency_proxy: 0.0,
        };
        report.latency_proxy = latency_model(&report, 1.0, 0.0);
        report
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerComm {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Tokens (or replicas) received in the dispatch round, self-delivery
    /// included.
    pub queue_tokens: u64,
    /// Peak words held in send plus receive buffers over all rounds.
    pub peak_payload_words: u64,
}

/// Traffic summary of one schedule execution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub schedule: String,
    pub p: usize,
    pub k: usize,
    pub skew: f64,
    pub word_size: usize,
    pub workers: Vec<WorkerComm>,
    pub rounds: Vec<RoundStats>,
    pub max_queue_tokens: u64,
    /// Payload words of the token dispatch round including self-delivery.
    pub dispatch_words: u64,
    /// Latency proxy at unit bandwidth and zero per-round latency.
    pub latency_proxy: f64,
}

impl CommReport {
    pub fn n_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn dispatch_bytes(&self) -> u64 {
        self.dispatch_words * self.word_size as u64
    }

    pub fn peak_payload_words(&self) -> u64 {
        self.workers.iter().map(|w| w.peak_payload_words).max().unwrap_or(0)
    }

    /// Sets the stored latency proxy for the given link model.
    pub fn with_latency(mut self, bandwidth_words_per_unit: f64, alpha_per_round: f64) -> Result<Self> {
        if !(bandwidth_words_per_unit > 0.0) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        self.latency_proxy = latency_model(&self, bandwidth_words_per_unit, alpha_per_round);
        Ok(self)
    }

    pub fn csv_rows(&self, config_hash: Option<&str>) -> Vec<String> {
        let rounds = self.n_rounds();
        self.workers
            .iter()
            .enumerate()
            .map(|(w, c)| {
                let row = format!(
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    self.schedule,
                    self.p,
                    self.k,
                    self.skew,
                    w,
                    c.bytes_sent,
                    c.bytes_received,
                    self.max_queue_tokens,
                    rounds,
                    self.latency_proxy,
                    c.peak_payload_words
                );
                match config_hash {
                    Some(h) => format!("{row},{h}"),
                    None => row,
                }
            })
            .collect()
    }
}

pub fn write_comm_csv<W: Write>(mut out: W, reports: &[CommReport]) -> std::io::Result<()> {
    writeln!(out, "{COMM_CSV_HEADER}")?;
    for r in reports {
        for row in r.csv_rows(None) {
            writeln!(out, "{row}")?;
        }
    }
    Ok(())
}

/// `Σ_rounds (α + max_w received_words_w / bandwidth)`, counting only
/// inter-worker words.
pub fn latency_model(report: &CommReport, bandwidth_words_per_unit: f64, alpha_per_round: f64) -> f64 {
    report
        .rounds
        .iter()
        .map(|r| {
            let worst = r.received_words.iter().copied().max().unwrap_or(0);
            alpha_per_round + worst as f64 / bandwidth_words_per_unit
        })
        .sum()
}

/// Contiguous token ranges per worker; the first `n % P` shards get one
/// extra token.
pub fn shard_ranges(n: usize, p: usize) -> Vec<std::ops::Range<usize>> {
    let base = n / p;
    let extra = n % p;
    let mut start = 0;
    (0..p)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Zipf skew over expert ranks. Expert `e` has rank `e + 1` and probability
/// `∝ (e + 1)^(−s)`; worker `w` owns experts `w·N_e/P .. (w+1)·N_e/P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewModel {
    pub s: f64,
    pub n_experts: usize,
    pub n_workers: usize,
}

impl SkewModel {
    pub fn new(s: f64, n_experts: usize, n_workers: usize) -> Result<Self> {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::InvalidParameter(format!("skew must be finite and >= 0, got {s}")));
        }
        if n_experts == 0 || n_workers == 0 || !n_experts.is_multiple_of(n_workers) {
            return Err(Error::Config(format!("{n_experts} experts cannot be split over {n_workers} workers")));
        }
        Ok(SkewModel { s, n_experts, n_workers })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let w: Vec<f64> = (1..=self.n_experts).map(|r| (r as f64).powf(-self.s)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }

    pub fn experts_per_worker(&self) -> usize {
        self.n_experts / self.n_workers
    }

    pub fn owner(&self, expert: usize) -> usize {
        expert / self.experts_per_worker()
    }

    /// Probability mass of a single draw landing on worker `w`.
    pub fn worker_share(&self, w: usize) -> f64 {
        let per = self.experts_per_worker();
        self.probabilities()[w * per..(w + 1) * per].iter().sum()
    }
}

/// `k` distinct experts per token, drawn by sequential rejection.
pub fn zipf_assign(model: &SkewModel, n_tokens: usize, k: usize, rng: &mut Rng) -> Result<Vec<u32>> {
    if !(model.s >= 0.0) {
        return Err(Error::InvalidParameter(format!("skew must be >= 0, got {}", model.s)));
    }
    if k == 0 || k > model.n_experts {
        return Err(Error::InvalidParameter(format!("k = {k} outside 1..={}", model.n_experts)));
    }
    let dist = WeightedIndex::new(model.probabilities())
        .map_err(|e| Error::InvalidParameter(format!("zipf weights: {e}")))?;
    let mut out = Vec::with_capacity(n_tokens * k);
    let mut row = Vec::with_capacity(k);
    for _ in 0..n_tokens {
        row.clear();
        while row.len() < k {
            let e = dist.sample(rng.inner_mut()) as u32;
            if !row.contains(&e) {
                row.push(e);
            }
        }
        out.extend_from_slice(&row);
    }
    Ok(out)
}

/// Fraction of replicas owned by each worker.
pub fn worker_fractions(indices: &[u32], n_experts: usize, p: usize) -> Vec<f64> {
    let per = n_experts / p;
    let mut counts = vec![0u64; p];
    for &e in indices {
        counts[e as usize / per] += 1;
    }
    counts.iter().map(|&c| c as f64 / indices.len().max(1) as f64).collect()
}

fn check_hp(p: usize, n_heads: usize) -> Result<()> {
    if p > n_heads || !n_heads.is_multiple_of(p) {
        return Err(Error::Config(format!(
            "head parallel needs P <= N_h and N_h divisible by P (P = {p}, N_h = {n_heads})"
        )));
    }
    Ok(())
}

/// Head Parallel forward of the multi-head layer on `x: [..., d]`.
///
/// Each worker projects its token shard, sends the sub-tokens of every head
/// group to the owning worker, the owners run their heads on all tokens,
/// and outputs return for the local output projection.
pub fn hp_schedule<T: Scalar>(
    group: &mut WorkerGroup,
    x: &Tensor<T>,
    layer: &MHLatentMoEParams<T>,
    exec: &ExecConfig,
) -> Result<(Tensor<T>, CommReport)> {
    layer.validate()?;
    let p = group.size();
    let (nh, dh, d) = (layer.n_heads(), layer.d_h(), layer.d());
    check_hp(p, nh)?;
    if x.ndim() == 0 || *x.shape().last().unwrap() != d {
        return Err(Error::Shape(format!("input {:?} must end in d = {d}", x.shape())));
    }
    let n = x.len() / d;
    let g = nh / p;
    let dp = layer.w_in.shape()[0];
    let parts = if layer.separate_routing { 2 } else { 1 };
    let shards = shard_ranges(n, p);

    // Local projection, then one message per head group.
    let mut dispatch: Vec<Vec<Vec<T>>> = Vec::with_capacity(p);
    for shard in &shards {
        let nw = shard.len();
        let mut z = vec![T::zero(); nw * dp];
        matmul_nt_into(&x.data()[shard.start * d..shard.end * d], layer.w_in.data(), &mut z, nw, d, dp);
        let mut row = Vec::with_capacity(p);
        for owner in 0..p {
            let mut msg = Vec::with_capacity(nw * g * dh * parts);
            for t in 0..nw {
                for part in 0..parts {
                    let c0 = (part * nh + owner * g) * dh;
                    msg.extend_from_slice(&z[t * dp + c0..t * dp + c0 + g * dh]);
                }
            }
            row.push(msg);
        }
        dispatch.push(row);
    }
    let received = group.all_to_all("hp_dispatch", dispatch, 1, g * dh * parts)?;

    // Each owner runs its heads on every token, in global token order.
    let mut returns: Vec<Vec<Vec<T>>> = Vec::with_capacity(p);
    for (owner, inbox) in received.iter().enumerate() {
        let mut arena = Arena::unbounded(format!("hp_worker_{owner}"));
        let mut head_out: Vec<Tensor<T>> = Vec::with_capacity(g);
        for local in 0..g {
            let h = owner * g + local;
            let mut xs = Vec::with_capacity(n * dh);
            let mut rs = Vec::with_capacity(n * dh);
            for msg in inbox {
                let width = g * dh * parts;
                for tok in msg.chunks(width) {
                    xs.extend_from_slice(&tok[local * dh..(local + 1) * dh]);
                    let roff = if parts == 2 { g * dh } else { 0 };
                    rs.extend_from_slice(&tok[roff + local * dh..roff + (local + 1) * dh]);
                }
            }
            let xi = Tensor::from_vec(&[n, dh], xs)?;
            let ri = Tensor::from_vec(&[n, dh], rs)?;
            let (oi, _) = moe_forward_cached(&layer.heads[h], &xi, &ri, exec, &mut arena)?;
            head_out.push(oi);
        }
        let mut row = Vec::with_capacity(p);
        for shard in &shards {
            let mut msg = Vec::with_capacity(shard.len() * g * dh);
            for t in shard.clone() {
                for o in &head_out {
                    msg.extend_from_slice(&o.data()[t * dh..(t + 1) * dh]);
                }
            }
            row.push(msg);
        }
        returns.push(row);
    }
    let back = group.all_to_all("hp_return", returns, 1, g * dh)?;

    let mut out = Tensor::zeros(&[n, d]);
    for (w, shard) in shards.iter().enumerate() {
        let nw = shard.len();
        let mut y = vec![T::zero(); nw * nh * dh];
        for (owner, msg) in back[w].iter().enumerate() {
            for t in 0..nw {
                let src = &msg[t * g * dh..(t + 1) * g * dh];
                y[t * nh * dh + owner * g * dh..t * nh * dh + (owner + 1) * g * dh].copy_from_slice(src);
            }
        }
        matmul_nt_into(&y, layer.w_out.data(), &mut out.data_mut()[shard.start * d..shard.end * d], nw, nh * dh, d);
    }
    let k = layer.heads[0].k;
    Ok((out.reshape(x.shape())?, group.finish("HP", k, 0.0, 0)))
}

/// HP traffic depends only on the shapes; this evaluates it without
/// running the layer.
pub fn hp_traffic(group: &mut WorkerGroup, n_tokens: usize, n_heads: usize, d_h: usize, k: usize) -> Result<CommReport> {
    let p = group.size();
    check_hp(p, n_heads)?;
    let g = n_heads / p;
    let shards = shard_ranges(n_tokens, p);
    let make = || -> Vec<Vec<Vec<()>>> {
        shards.iter().map(|s| (0..p).map(|_| vec![(); s.len()]).collect()).collect()
    };
    group.all_to_all("hp_dispatch", make(), g * d_h, 1)?;
    // Owner j returns shard i's tokens to worker i.
    let ret: Vec<Vec<Vec<()>>> = (0..p).map(|_| shards.iter().map(|s| vec![(); s.len()]).collect()).collect();
    group.all_to_all("hp_return", ret, g * d_h, 1)?;
    Ok(group.finish("HP", k, 0.0, 0))
}

/// Where the expert assignments of an EP run come from.
#[derive(Clone, Copy, Debug)]
pub enum EpAssignment<'a> {
    /// Each worker routes its shard with the module's router.
    Router,
    /// Fixed `[n·k]` expert ids (for example from [`zipf_assign`]); gates
    /// are uniform `1/k`.
    Fixed(&'a [u32]),
}

fn check_ep(p: usize, n_experts: usize) -> Result<()> {
    if !n_experts.is_multiple_of(p) {
        return Err(Error::Config(format!("{n_experts} experts cannot be split over {p} workers")));
    }
    Ok(())
}

/// Replica ids `t·k + j` grouped by (source worker, destination worker).
fn ep_routes(indices: &[u32], k: usize, shards: &[std::ops::Range<usize>], per: usize) -> Vec<Vec<Vec<usize>>> {
    let p = shards.len();
    shards
        .iter()
        .map(|s| {
            let mut row = vec![Vec::new(); p];
            for r in s.start * k..s.end * k {
                row[indices[r] as usize / per].push(r);
            }
            row
        })
        .collect()
}

fn ep_metadata(group: &mut WorkerGroup, routes: &[Vec<Vec<usize>>], indices: &[u32], per: usize) -> Result<()> {
    let p = group.size();
    let meta: Vec<Vec<Vec<u64>>> = routes
        .iter()
        .map(|row| {
            (0..p)
                .map(|j| {
                    let mut counts = vec![0u64; per];
                    for &r in &row[j] {
                        counts[indices[r] as usize - j * per] += 1;
                    }
                    counts
                })
                .collect()
        })
        .collect();
    group.all_to_all("ep_metadata", meta, 1, 1)?;
    Ok(())
}

/// Expert Parallel forward of one MoE module on `x: [n, d]`.
///
/// Replicates tokens `k` times, exchanges per-expert queue lengths,
/// dispatches replicas to the workers owning their experts, computes,
/// returns the outputs and aggregates on the source worker.
pub fn ep_schedule<T: Scalar>(
    group: &mut WorkerGroup,
    x: &Tensor<T>,
    module: &MoEModule<T>,
    assignment: EpAssignment<'_>,
    exec: &ExecConfig,
    skew: f64,
) -> Result<(Tensor<T>, CommReport)> {
    module.validate()?;
    let p = group.size();
    let (d, ne, k) = (module.d_h(), module.n_experts(), module.k);
    check_ep(p, ne)?;
    if x.ndim() != 2 || x.shape()[1] != d {
        return Err(Error::Shape(format!("EP input {:?}, expected [n, {d}]", x.shape())));
    }
    let n = x.shape()[0];
    let per = ne / p;
    let shards = shard_ranges(n, p);

    // Routing on the source workers.
    let (indices, gates): (Vec<u32>, Vec<T>) = match assignment {
        EpAssignment::Fixed(idx) => {
            if idx.len() != n * k {
                return Err(Error::Shape(format!("{} assignments for {n} tokens and k = {k}", idx.len())));
            }
            if let Some(&bad) = idx.iter().find(|&&e| e as usize >= ne) {
                return Err(Error::IndexOutOfRange { index: bad as usize, bound: ne });
            }
            (idx.to_vec(), vec![T::one() / T::from_f64(k as f64); n * k])
        }
        EpAssignment::Router => {
            let mut idx = Vec::with_capacity(n * k);
            let mut gts = Vec::with_capacity(n * k);
            for (w, s) in shards.iter().enumerate() {
                let mut arena = Arena::unbounded(format!("ep_route_{w}"));
                let xr = Tensor::from_vec(&[1, s.len(), 1, d], x.data()[s.start * d..s.end * d].to_vec())?;
                let topk = match exec.router {
                    crate::layer::RouterMode::Naive => route_naive(&xr, &module.router, k, &mut arena)?,
                    crate::layer::RouterMode::IoAware => {
                        route_ioaware_fwd(&xr, &module.router, k, exec.route_blocks, &mut arena)?
                    }
                };
                idx.extend_from_slice(topk.indices.data());
                gts.extend_from_slice(gate_from_scores(&topk).data());
            }
            (idx, gts)
        }
    };

    let routes = ep_routes(&indices, k, &shards, per);
    ep_metadata(group, &routes, &indices, per)?;

    let dispatch: Vec<Vec<Vec<T>>> = routes
        .iter()
        .map(|row| {
            row.iter()
                .map(|reps| {
                    let mut msg = Vec::with_capacity(reps.len() * d);
                    for &r in reps {
                        msg.extend_from_slice(&x.data()[(r / k) * d..(r / k + 1) * d]);
                    }
                    msg
                })
                .collect()
        })
        .collect();
    let inbox = group.all_to_all("ep_dispatch", dispatch, 1, d)?;

    // Owners sort received replicas by local expert and compute.
    let mut returns: Vec<Vec<Vec<T>>> = Vec::with_capacity(p);
    for (owner, msgs) in inbox.iter().enumerate() {
        let e0 = owner * per;
        let local_ids: Vec<u32> = (0..p)
            .flat_map(|src| routes[src][owner].iter().map(|&r| indices[r] - e0 as u32))
            .collect();
        let rows: Vec<T> = msgs.iter().flat_map(|m| m.iter().copied()).collect();
        let m = local_ids.len();
        let mut out_rows = vec![T::zero(); m * d];
        if m > 0 {
            let bank = ExpertBank::new(
                Tensor::from_vec(
                    &[per, module.d_e(), d],
                    module.bank.w_in.data()[e0 * module.d_e() * d..(e0 + per) * module.d_e() * d].to_vec(),
                )?,
                Tensor::from_vec(
                    &[per, module.d_e(), d],
                    module.bank.w_out.data()[e0 * module.d_e() * d..(e0 + per) * module.d_e() * d].to_vec(),
                )?,
            )?;
            let plan = build_cluster_plan(&local_ids, 1, per)?;
            let xc = Tensor::from_vec(&[m, d], plan.permute_rows(&rows, d))?;
            let mut arena = Arena::unbounded(format!("ep_worker_{owner}"));
            let yc = run_experts(exec.backend, &xc, &plan, &bank, exec.tiles, &mut arena)?;
            out_rows = plan.unpermute_rows(yc.data(), d);
        }
        let mut row = Vec::with_capacity(p);
        let mut off = 0;
        for src in 0..p {
            let cnt = routes[src][owner].len();
            row.push(out_rows[off * d..(off + cnt) * d].to_vec());
            off += cnt;
        }
        returns.push(row);
    }
    let back = group.all_to_all("ep_return", returns, 1, d)?;

    // Aggregate on the source workers in (token, slot) order.
    let mut replica_out = vec![T::zero(); n * k * d];
    for (w, from_owner) in back.iter().enumerate() {
        for (owner, msg) in from_owner.iter().enumerate() {
            for (i, &r) in routes[w][owner].iter().enumerate() {
                replica_out[r * d..(r + 1) * d].copy_from_slice(&msg[i * d..(i + 1) * d]);
            }
        }
    }
    let identity = build_cluster_plan(&vec![0u32; n * k], k, 1)?;
    let out = aggregate_weighted(&Tensor::from_vec(&[n * k, d], replica_out)?, &gates, &identity)?;
    Ok((out, group.finish("EP", k, skew, 1)))
}

/// EP traffic for fixed assignments without running any expert; matches the
/// report of [`ep_schedule`] for the same assignments.
pub fn ep_traffic(
    group: &mut WorkerGroup,
    indices: &[u32],
    k: usize,
    n_experts: usize,
    d: usize,
    skew: f64,
) -> Result<CommReport> {
    let p = group.size();
    check_ep(p, n_experts)?;
    if k == 0 || !indices.len().is_multiple_of(k) {
        return Err(Error::Shape(format!("{} assignments not divisible by k = {k}", indices.len())));
    }
    let n = indices.len() / k;
    let per = n_experts / p;
    let shards = shard_ranges(n, p);
    let routes = ep_routes(indices, k, &shards, per);
    ep_metadata(group, &routes, indices, per)?;
    group.all_to_all("ep_dispatch", routes.clone(), d, 1)?;
    let returns: Vec<Vec<Vec<usize>>> =
        (0..p).map(|owner| (0..p).map(|src| routes[src][owner].clone()).collect()).collect();
    group.all_to_all("ep_return", returns, d, 1)?;
    Ok(group.finish("EP", k, skew, 1))
}
