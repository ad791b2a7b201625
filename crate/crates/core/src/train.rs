//! Toy regression trainer for the multi-head layer.
//!
//! Inputs come from a few Gaussian clusters with skewed frequencies, so
//! routing starts out unbalanced; every cluster has its own linear target. The
//! model is trained full-batch with Adam on the mean squared error while
//! the aux-free balancer adjusts the router biases after every step.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{mh_latentmoe_backward_cached, mh_latentmoe_forward_cached, ExecConfig, LayerDims, MHLatentMoEParams};
use crate::memory::Arena;
use crate::rng::Rng;
use crate::router::LoadBalanceState;
use crate::tensor::{matmul_nt_into, Scalar, Tensor};

pub const LOSS_CSV_HEADER: &str = "run,step,loss,balance_ratio";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seq_len: usize,
    /// Distance of the input clusters from the origin.
    pub input_skew: f64,
    /// Bias step of the load balancer.
    pub balance_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 200, lr: 3e-3, batch: 4, seq_len: 32, input_skew: 2.0, balance_rate: 3e-2 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.seq_len == 0 {
            return Err(Error::Config("steps, batch and seq_len must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.balance_rate >= 0.0) || !self.input_skew.is_finite() {
            return Err(Error::Config("lr and balance_rate must be >= 0, input_skew finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Worst-head max/mean expert load of this step's routing.
    pub balance_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub run: String,
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean balance ratio over the last `n` steps.
    pub fn tail_balance(&self, n: usize) -> f64 {
        let tail = &self.records[self.records.len().saturating_sub(n)..];
        tail.iter().map(|r| r.balance_ratio).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(out, "{},{},{},{}", self.run, r.step, r.loss, r.balance_ratio)?;
        }
        Ok(())
    }
}

/// Adam with bias correction over a flat list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                let upd = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w -= T::from_f64(upd);
            }
        }
    }
}

fn adam_step<T: Scalar>(opt: &mut Adam, p: &mut MHLatentMoEParams<T>, g: &crate::layer::MHGrads<T>) {
    let mut params: Vec<&mut Tensor<T>> = vec![&mut p.w_in, &mut p.w_out];
    let mut grads: Vec<&Tensor<T>> = vec![&g.w_in, &g.w_out];
    for (h, hg) in p.heads.iter_mut().zip(&g.heads) {
        params.push(&mut h.router.w_r);
        params.push(&mut h.bank.w_in);
        params.push(&mut h.bank.w_out);
        grads.extend([&hg.w_r, &hg.w_in, &hg.w_out]);
    }
    opt.step(&mut params, &grads);
}

/// Number of input clusters in [`synthetic_batch`].
pub const TOY_CLUSTERS: usize = 8;

/// Deterministic dataset: inputs `[B, T, d]` and targets of the same shape.
///
/// Each token belongs to one of [`TOY_CLUSTERS`] clusters drawn with
/// probability `∝ 1/(c + 1)`; its input is `input_skew · center_c + ε` and
/// its target is `A_c · x` for a per-cluster random map `A_c`.
pub fn synthetic_batch<T: Scalar>(dims: &LayerDims, cfg: &TrainConfig, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut rng = Rng::new(seed).fork(1);
    let d = dims.d;
    let n = cfg.batch * cfg.seq_len;
    let centers: Vec<f64> = (0..TOY_CLUSTERS * d).map(|_| rng.normal()).collect();
    let teachers: Vec<Vec<T>> =
        (0..TOY_CLUSTERS).map(|_| rng.normal_vec(d * d, 0.5 / (d as f64).sqrt())).collect();
    let weights: Vec<f64> = (0..TOY_CLUSTERS).map(|c| 1.0 / (c + 1) as f64).collect();
    let total: f64 = weights.iter().sum();
    let mut x = Vec::with_capacity(n * d);
    let mut y = vec![T::zero(); n * d];
    for t in 0..n {
        let mut u = rng.uniform() * total;
        let mut c = 0;
        while c + 1 < TOY_CLUSTERS && u >= weights[c] {
            u -= weights[c];
            c += 1;
        }
        let row: Vec<T> = (0..d).map(|j| T::from_f64(cfg.input_skew * centers[c * d + j] + rng.normal())).collect();
        matmul_nt_into(&row, &teachers[c], &mut y[t * d..(t + 1) * d], 1, d, d);
        x.extend(row);
    }
    let shape = [cfg.batch, cfg.seq_len, d];
    (Tensor::from_vec(&shape, x).unwrap(), Tensor::from_vec(&shape, y).unwrap())
}

/// Trains a freshly initialized layer and returns the per-step log and the
/// final parameters. With `lr == 0` every parameter, the router biases
/// included, stays frozen.
pub fn train_toy<T: Scalar>(
    run: &str,
    dims: &LayerDims,
    cfg: &TrainConfig,
    exec: &ExecConfig,
    seed: u64,
) -> Result<(TrainLog, MHLatentMoEParams<T>)> {
    dims.validate()?;
    cfg.validate()?;
    let mut params: MHLatentMoEParams<T> = MHLatentMoEParams::init(&mut Rng::new(seed), dims)?;
    let (x, y) = synthetic_batch::<T>(dims, cfg, seed);
    let n_elems = x.len();
    let scale = T::from_f64(2.0 / n_elems as f64);
    let mut opt = Adam::new(cfg.lr);
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut arena = Arena::unbounded(format!("{run}_step_{step}"));
        let (out, cache) = mh_latentmoe_forward_cached(&params, &x, exec, &mut arena)?;
        let diff: Vec<T> = out.data().iter().zip(y.data()).map(|(&a, &b)| a - b).collect();
        let loss = diff.iter().map(|&v| (v * v).as_f64()).sum::<f64>() / n_elems as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut balance = LoadBalanceState::new(dims.n_heads, dims.n_experts, cfg.balance_rate);
        for (h, c) in cache.heads.iter().enumerate() {
            balance.tally_head(h, c.topk.indices.data());
        }
        records.push(StepRecord { step, loss, balance_ratio: balance.imbalance() });
        if cfg.lr == 0.0 {
            continue;
        }
        let d_out = Tensor::from_vec(out.shape(), diff.iter().map(|&v| scale * v).collect())?;
        let grads = mh_latentmoe_backward_cached(&params, &cache, &d_out, exec, &mut arena)?;
        adam_step(&mut opt, &mut params, &grads);
        params.apply_balance(&balance)?;
    }
    Ok((TrainLog { run: run.to_string(), records }, params))
}
